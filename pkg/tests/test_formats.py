"""On-disk formats: PFM, PGM, CSV, checkpoints, SVG plots."""

import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikedepth import formats as F
from spikedepth.layers import ParamBag


class TestPfm:
    def test_roundtrip_float32_exact(self, tmp_path):
        img = np.random.default_rng(0).standard_normal((5, 7))
        path = tmp_path / "x.pfm"
        F.write_pfm(path, img)
        back = F.read_pfm(path)
        np.testing.assert_array_equal(back, img.astype(np.float32))
        assert back.dtype == np.float64

    def test_header_layout(self, tmp_path):
        path = tmp_path / "x.pfm"
        F.write_pfm(path, np.zeros((2, 3)))
        raw = path.read_bytes()
        assert raw.startswith(b"Pf\n3 2\n-1.0\n")
        assert len(raw) == len(b"Pf\n3 2\n-1.0\n") + 2 * 3 * 4

    def test_row_order_bottom_up(self, tmp_path):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])
        path = tmp_path / "x.pfm"
        F.write_pfm(path, img)
        raw = path.read_bytes()
        pixels = np.frombuffer(raw[len(b"Pf\n2 2\n-1.0\n"):], dtype="<f4")
        # file stores the bottom row first
        np.testing.assert_array_equal(pixels, [3.0, 4.0, 1.0, 2.0])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pfm"
        path.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 48)
        with pytest.raises(F.FormatError, match="not a grayscale"):
            F.read_pfm(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "short.pfm"
        path.write_bytes(b"Pf\n4 4\n-1.0\n" + b"\x00" * 10)
        with pytest.raises(F.FormatError, match="expected 64"):
            F.read_pfm(path)

    def test_non_2d_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            F.write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_roundtrip_property(self, seed):
        rng = np.random.default_rng(seed)
        img = rng.uniform(-100, 100, size=(3, 4)).astype(np.float32)
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "y.pfm")
            F.write_pfm(path, img)
            np.testing.assert_array_equal(F.read_pfm(path), img)


class TestPgm:
    def test_roundtrip_uint8(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        path = tmp_path / "x.pgm"
        F.write_pgm(path, img, max_value=255)
        np.testing.assert_array_equal(F.read_pgm(path), img)

    def test_scaling_maps_max_to_255(self, tmp_path):
        img = np.array([[0.0, 0.5, 1.0]])
        path = tmp_path / "x.pgm"
        F.write_pgm(path, img)
        got = F.read_pgm(path)
        np.testing.assert_array_equal(got, [[0, 127, 255]])

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 1 255\n\x05\x06")
        np.testing.assert_array_equal(F.read_pgm(path), [[5, 6]])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P2\n2 2\n255\n....")
        with pytest.raises(F.FormatError):
            F.read_pgm(path)

    def test_sixteen_bit_rejected(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(F.FormatError, match="8-bit"):
            F.read_pgm(path)

    def test_truncated_pixels_rejected(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5\n4 4\n255\nab")
        with pytest.raises(F.FormatError, match="expected 16"):
            F.read_pgm(path)


class TestCsv:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "t.csv"
        F.write_csv(path, ["a", "b"], [[1, 2.5], ["x", 0.1]])
        header, rows = F.read_csv(path)
        assert header == ["a", "b"]
        assert rows[0] == ["1", "2.5"]
        assert float(rows[1][1]) == 0.1

    def test_floats_keep_full_precision(self, tmp_path):
        value = 1.0 / 3.0
        path = tmp_path / "p.csv"
        F.write_csv(path, ["v"], [[value]])
        _, rows = F.read_csv(path)
        assert float(rows[0][0]) == value  # %.17g is lossless for float64

    def test_ragged_row_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n3\n")
        with pytest.raises(F.FormatError, match="width"):
            F.read_csv(path)

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(F.FormatError, match="empty"):
            F.read_csv(path)


class TestCheckpoint:
    def _bag(self, seed=0):
        bag = ParamBag(np.random.default_rng(seed))
        bag.conv_weight("conv.w", 4, 3, 3, 3)
        bag.zeros("conv.b", 4)
        bag.ones("norm.g", 4)
        return bag

    def test_roundtrip_float32_exact(self, tmp_path):
        bag = self._bag()
        path = tmp_path / "m.ckpt"
        F.save_checkpoint(path, bag.named())
        state = F.load_checkpoint(path)
        assert set(state) == set(bag.named())
        for name, param in bag.named().items():
            np.testing.assert_array_equal(
                state[name], param.data.astype(np.float32))

    def test_apply_restores_model(self, tmp_path):
        bag = self._bag(seed=1)
        path = tmp_path / "m.ckpt"
        F.save_checkpoint(path, bag.named())
        target = self._bag(seed=2)
        F.apply_checkpoint(target, F.load_checkpoint(path))
        for name, param in bag.named().items():
            np.testing.assert_array_equal(
                target[name].data, param.data.astype(np.float32))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(F.FormatError, match="magic"):
            F.load_checkpoint(path)

    def test_truncated_blob_rejected(self, tmp_path):
        bag = self._bag()
        path = tmp_path / "m.ckpt"
        F.save_checkpoint(path, bag.named())
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(F.FormatError, match="past end"):
            F.load_checkpoint(path)

    def test_missing_tensor_rejected(self, tmp_path):
        bag = self._bag()
        named = dict(bag.named())
        del named["conv.b"]
        path = tmp_path / "m.ckpt"
        F.save_checkpoint(path, named)
        with pytest.raises(F.FormatError, match="mismatch"):
            F.apply_checkpoint(bag, F.load_checkpoint(path))

    def test_wrong_shape_rejected(self, tmp_path):
        bag = self._bag()
        state = {name: p.data for name, p in bag.named().items()}
        state["conv.b"] = np.zeros(5)
        with pytest.raises(F.FormatError, match="shape"):
            F.apply_checkpoint(bag, state)


class TestSvg:
    def test_line_plot_well_formed(self, tmp_path):
        path = tmp_path / "p.svg"
        xs = list(range(10))
        F.svg_plot(path, {"loss": (xs, [v * 0.5 for v in xs])},
                   title="t", xlabel="x", ylabel="y")
        text = path.read_text()
        assert text.startswith("<svg") or "<svg" in text
        assert "polyline" in text
        assert "loss" in text and "</svg>" in text

    def test_scatter_plot(self, tmp_path):
        path = tmp_path / "s.svg"
        F.svg_plot(path, {"pts": ([0, 1, 2], [1.0, -1.0, 0.5])},
                   kind="scatter")
        text = path.read_text()
        assert "circle" in text

    def test_multiple_series_get_distinct_colors(self, tmp_path):
        path = tmp_path / "m.svg"
        F.svg_plot(path, {"a": ([0, 1], [0, 1]), "b": ([0, 1], [1, 0])})
        text = path.read_text()
        used = [c for c in F._PALETTE if c in text]
        assert len(used) >= 2
