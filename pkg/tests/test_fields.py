import numpy as np
import pytest

from entroport.fields import (Density, GridError, GridSpec, Polyline, ScalarField,
                              dump_json, format_float, l1_distance, quad_weights,
                              uniform_density, write_polylines_csv,
                              write_scalar_csv)


class TestGridSpec:
    def test_spacing_and_center(self):
        g = GridSpec((-5.0, -5.0), (5.0, 5.0), (201, 201))
        assert g.spacing == (0.05, 0.05)
        assert g.center == (0.0, 0.0)
        assert g.node_count == 201 * 201
        assert g.volume == 100.0

    def test_rejects_bad_bounds(self):
        with pytest.raises(GridError, match="not above"):
            GridSpec((1.0,), (1.0,), (5,))

    def test_rejects_too_few_nodes(self):
        with pytest.raises(GridError, match="at least 3"):
            GridSpec((0.0,), (1.0,), (2,))

    def test_rejects_dimension_over_three(self):
        with pytest.raises(GridError):
            GridSpec((0,) * 4, (1,) * 4, (3,) * 4)

    def test_node_cap(self):
        with pytest.raises(GridError, match="cap"):
            GridSpec((0, 0, 0), (1, 1, 1), (300, 300, 300))

    def test_node_coords_row_major(self):
        g = GridSpec((0.0, 10.0), (1.0, 12.0), (3, 3))
        assert g.node_coords(0) == (0.0, 10.0)
        assert g.node_coords(1) == (0.0, 11.0)  # last axis varies fastest
        assert g.node_coords(3) == (0.5, 10.0)

    def test_weights_sum_to_volume(self):
        g = GridSpec((-2.0, 0.0), (3.0, 4.0), (11, 7))
        assert np.sum(quad_weights(g)) == pytest.approx(g.volume, rel=1e-14)


class TestFields:
    def test_scalar_field_rejects_nonfinite(self):
        g = GridSpec((0.0,), (1.0,), (3,))
        vals = np.array([0.0, np.inf, 1.0])
        with pytest.raises(ValueError, match="non-finite at node"):
            ScalarField(g, vals)

    def test_shape_mismatch(self):
        g = GridSpec((0.0,), (1.0,), (4,))
        with pytest.raises(ValueError, match="shape"):
            ScalarField(g, np.zeros(5))

    def test_uniform_density_normalized(self):
        g = GridSpec((-5.0, -5.0), (5.0, 5.0), (41, 41))
        u = uniform_density(g)
        assert u.integrate() == pytest.approx(1.0, abs=1e-14)
        assert u.Z == pytest.approx(g.volume)

    def test_density_rejects_bad_Z(self):
        g = GridSpec((0.0,), (1.0,), (3,))
        with pytest.raises(ValueError, match="positive"):
            Density(g, np.ones(3), Z=0.0, provenance="el-built")

    def test_l1_distance_requires_same_grid(self):
        a = uniform_density(GridSpec((0.0,), (1.0,), (5,)))
        b = uniform_density(GridSpec((0.0,), (1.0,), (7,)))
        with pytest.raises(ValueError):
            l1_distance(a, b)

    def test_l1_distance_value(self):
        g = GridSpec((0.0,), (1.0,), (5,))
        a = uniform_density(g)
        b = Density(g, a.values * 2.0, Z=1.0, provenance="el-built")
        assert l1_distance(a, b) == pytest.approx(1.0)


class TestPolyline:
    def test_needs_two_vertices(self):
        with pytest.raises(ValueError):
            Polyline(np.zeros((1, 2)))

    def test_rejects_repeated_vertices(self):
        with pytest.raises(ValueError, match="distinct"):
            Polyline(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]))

    def test_length(self):
        line = Polyline(np.array([[0.0, 0.0], [3.0, 4.0]]))
        assert line.length() == 5.0


class TestSerialization:
    def test_format_float_17_digits(self):
        assert format_float(np.pi) == "3.1415926535897931"
        assert format_float(1.0) == "1"

    def test_scalar_csv_layout(self, tmp_path):
        g = GridSpec((0.0, 0.0), (1.0, 1.0), (3, 3))
        f = ScalarField(g, np.arange(9.0).reshape(3, 3))
        path = tmp_path / "f.csv"
        write_scalar_csv(f, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "x1,x2,value"
        assert lines[1] == "0,0,0"
        assert lines[2] == "0,0.5,1"  # row-major: x2 advances first
        assert len(lines) == 10

    def test_covector_csv_layout(self, tmp_path):
        from entroport.fields import CovectorField, write_covector_csv

        g = GridSpec((0.0, 0.0), (1.0, 1.0), (3, 3))
        cov = CovectorField(g, np.stack([np.ones((3, 3)), 2.0 * np.ones((3, 3))]))
        path = tmp_path / "a.csv"
        write_covector_csv(cov, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "x1,x2,A1,A2"
        assert lines[1] == "0,0,1,2"
        assert len(lines) == 10

    def test_polyline_csv_blank_line_separator(self, tmp_path):
        lines = [Polyline(np.array([[0.0, 0.0], [1.0, 0.0]])),
                 Polyline(np.array([[0.0, 1.0], [1.0, 1.0]]))]
        path = tmp_path / "p.csv"
        write_polylines_csv(lines, path)
        text = path.read_text().splitlines()
        assert text[0] == "x1,x2"
        assert "" in text

    def test_dump_json_deterministic(self, tmp_path):
        obj = {"a": 1.0 / 3.0, "b": [1, 2.5], "c": None, "d": True, "e": "x"}
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        dump_json(obj, p1)
        dump_json(obj, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert "0.33333333333333331" in p1.read_text()
