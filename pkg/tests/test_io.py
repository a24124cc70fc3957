"""File format round trips and malformed-input errors."""

import numpy as np
import pytest

from segmap3d import io as smio


@pytest.fixture
def vertex_data():
    rng = np.random.default_rng(3)
    return {
        "x": rng.normal(size=10).astype(np.float32),
        "y": rng.normal(size=10).astype(np.float32),
        "z": rng.normal(size=10).astype(np.float32),
        "red": rng.integers(0, 256, 10, dtype=np.uint8),
        "green": rng.integers(0, 256, 10, dtype=np.uint8),
        "blue": rng.integers(0, 256, 10, dtype=np.uint8),
        "label": rng.integers(0, 40, 10).astype(np.uint16),
    }


class TestPly:
    @pytest.mark.parametrize("binary", [False, True])
    def test_roundtrip_vertices(self, tmp_path, vertex_data, binary):
        path = tmp_path / "pts.ply"
        smio.write_ply(path, vertex_data, binary=binary)
        back = smio.read_ply(path)
        for key, arr in vertex_data.items():
            assert back.vertex[key].dtype == arr.dtype
            np.testing.assert_array_equal(back.vertex[key], arr)

    @pytest.mark.parametrize("binary", [False, True])
    def test_roundtrip_faces(self, tmp_path, vertex_data, binary):
        faces = [np.array([0, 1, 2]), np.array([2, 3, 4, 5])]
        path = tmp_path / "mesh.ply"
        smio.write_ply(path, vertex_data, faces=faces, binary=binary)
        back = smio.read_ply(path)
        assert len(back.faces) == 2
        np.testing.assert_array_equal(back.faces[0], [0, 1, 2])
        np.testing.assert_array_equal(back.faces[1], [2, 3, 4, 5])

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ply"
        p.write_text("plx\nformat ascii 1.0\nend_header\n")
        with pytest.raises(smio.PlyError, match="line 1"):
            smio.read_ply(p)

    def test_truncated_ascii_reports_line(self, tmp_path):
        p = tmp_path / "short.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 3\n"
                     "property float x\nproperty float y\nproperty float z\n"
                     "end_header\n0 0 0\n1 1 1\n")
        with pytest.raises(smio.PlyError, match="line"):
            smio.read_ply(p)

    def test_non_numeric_reports_line(self, tmp_path):
        p = tmp_path / "junk.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 1\n"
                     "property float x\nproperty float y\nproperty float z\n"
                     "end_header\n0 zero 0\n")
        with pytest.raises(smio.PlyError, match="line 8"):
            smio.read_ply(p)

    def test_truncated_binary_reports_offset(self, tmp_path, vertex_data):
        path = tmp_path / "cut.ply"
        smio.write_ply(path, vertex_data, binary=True)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(smio.PlyError, match="byte"):
            smio.read_ply(path)

    def test_empty_vertex_element(self, tmp_path):
        p = tmp_path / "empty.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 0\n"
                     "property float x\nproperty float y\nproperty float z\n"
                     "end_header\n")
        with pytest.raises(smio.PlyError, match="empty"):
            smio.read_ply(p)


class TestTrajectory:
    def test_roundtrip(self, tmp_path):
        ts = np.array([0.0, 0.5])
        tr = np.array([[1, 2, 3], [4, 5, 6.0]])
        q = np.array([[0, 0, 0, 1], [0, 0.7071067811865476, 0, 0.7071067811865476]])
        path = tmp_path / "traj.txt"
        smio.write_trajectory(path, ts, tr, q)
        ts2, tr2, q2 = smio.read_trajectory(path)
        np.testing.assert_array_equal(ts2, ts)
        np.testing.assert_array_equal(tr2, tr)
        np.testing.assert_array_equal(q2, q)

    def test_bad_field_count(self, tmp_path):
        p = tmp_path / "traj.txt"
        p.write_text("0.0 1 2 3 0 0 0\n")
        with pytest.raises(smio.FormatError, match="line 1"):
            smio.read_trajectory(p)


class TestDepth:
    def test_roundtrip_quantized(self, tmp_path):
        depth = np.array([[0.0, 1.234], [2.5, 0.001]])
        path = tmp_path / "d.png"
        smio.write_depth(path, depth, depth_scale=1e-3)
        back = smio.read_depth(path, depth_scale=1e-3)
        np.testing.assert_allclose(back, depth, atol=5e-4)

    def test_zero_stays_zero(self, tmp_path):
        depth = np.zeros((4, 4))
        path = tmp_path / "d.png"
        smio.write_depth(path, depth, depth_scale=1e-3)
        assert smio.read_depth(path, depth_scale=1e-3).sum() == 0


class TestTensor:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.normal(size=(3, 4, 5)).astype(np.float32)
        path = tmp_path / "t.smpt"
        smio.write_tensor(path, arr)
        back = smio.read_tensor(path)
        assert back.shape == (3, 4, 5)
        np.testing.assert_array_equal(back.astype(np.float32), arr)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "t.smpt"
        p.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(smio.FormatError, match="magic"):
            smio.read_tensor(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.smpt"
        smio.write_tensor(p, np.ones((4, 4), dtype=np.float32))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(smio.FormatError, match="truncated payload"):
            smio.read_tensor(p)
