import numpy as np
import pytest

from stainlab import io
from stainlab.errors import FormatError, ImageReadError


class TestFeatureSets:
    def test_binary_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(7, 5)).astype(np.float32)
        io.write_feature_set(tmp_path / "a.fset", x)
        np.testing.assert_array_equal(io.read_feature_set(tmp_path / "a.fset"), x)

    def test_csv_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(4, 3))
        io.write_feature_csv(tmp_path / "a.csv", x, ids=["p", "q", "r", "s"])
        np.testing.assert_array_equal(io.read_feature_set(tmp_path / "a.csv"), x)

    def test_truncated(self, tmp_path, rng):
        io.write_feature_set(tmp_path / "a.fset", rng.normal(size=(3, 3)))
        data = (tmp_path / "a.fset").read_bytes()
        (tmp_path / "b.fset").write_bytes(data[:-2])
        with pytest.raises(FormatError):
            io.read_feature_set(tmp_path / "b.fset")

    def test_bad_header(self, tmp_path):
        (tmp_path / "x.csv").write_text("name,a\n1,2\n")
        with pytest.raises(FormatError):
            io.read_feature_set(tmp_path / "x.csv")


class TestMaps:
    def test_fmap_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(3, 4, 2)).astype(np.float32)
        io.write_fmap(tmp_path / "m.fmap", x)
        np.testing.assert_array_equal(io.read_fmap(tmp_path / "m.fmap"), x)

    def test_fmap_magic(self, tmp_path):
        (tmp_path / "m.fmap").write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(FormatError):
            io.read_fmap(tmp_path / "m.fmap")

    def test_pgm16(self, tmp_path):
        v = np.array([[0.0, 1.0], [2.0, 4.0]])
        io.write_pgm16(tmp_path / "o.pgm", v, 4.0, "scale 4")
        arr, comments = io.read_pgm16(tmp_path / "o.pgm")
        np.testing.assert_array_equal(arr, [[0, 16384], [32768, 65535]])
        assert comments == ["scale 4"]
        assert (tmp_path / "o.pgm").read_bytes().startswith(b"P5\n")


class TestImages:
    @pytest.mark.parametrize("suffix", [".png", ".tif"])
    def test_round_trip(self, tmp_path, rng, suffix):
        img = rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
        io.write_image(tmp_path / f"a{suffix}", img)
        np.testing.assert_array_equal(io.read_image(tmp_path / f"a{suffix}"), img)

    def test_corrupt(self, tmp_path):
        p = tmp_path / "bad.png"
        p.write_bytes(b"not an image")
        with pytest.raises(ImageReadError) as exc:
            io.read_image(p)
        assert "bad.png" in str(exc.value)

    def test_sixteen_bit_rejected(self, tmp_path):
        from PIL import Image

        p = tmp_path / "deep.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(p)
        with pytest.raises(ImageReadError):
            io.read_image(p)


def test_checkpoint_round_trip(tmp_path, rng):
    t = {"a": rng.normal(size=(2, 3)), "b": np.array([1.5])}
    io.save_checkpoint(tmp_path / "ck", t)
    back = io.load_checkpoint(tmp_path / "ck")
    assert list(back) == ["a", "b"]
    for k in t:
        np.testing.assert_array_equal(back[k], t[k])
