from __future__ import annotations

import io
import struct

import numpy as np
import pytest
from PIL import Image

from xforge.attributions import AttributionMap, PatchPartition
from xforge.engine import FormatError
from xforge.io import (
    HeatmapRender,
    colormap,
    decode_map,
    encode_map,
    load_map,
    read_csv,
    render_heatmap,
    save_map,
    top_features,
    top_mask,
    write_csv,
)


@pytest.fixture
def amap():
    scores = np.random.default_rng(0).exponential(size=(32, 32)).astype(np.float32)
    return AttributionMap(scores, "integrated_gradients", 2, instance="test_0001")


class TestXmap:
    def test_round_trip_bitwise(self, amap, tmp_path):
        path = tmp_path / "m.xmap"
        save_map(path, amap)
        back = load_map(path)
        assert back.scores.tobytes() == amap.scores.tobytes()
        assert (back.method, back.target) == (amap.method, amap.target)
        assert encode_map(back) == path.read_bytes()

    def test_header_layout(self, amap):
        buf = encode_map(amap)
        assert buf[:4] == b"XMAP"
        version, tag_len = struct.unpack_from("<HH", buf, 4)
        assert version == 1 and buf[8 : 8 + tag_len] == b"integrated_gradients"
        cls, rank = struct.unpack_from("<HB", buf, 8 + tag_len)
        assert (cls, rank) == (2, 2)
        assert struct.unpack_from("<2I", buf, 11 + tag_len) == (32, 32)
        assert len(buf) == 19 + tag_len + 4 * 32 * 32

    def test_wrong_magic(self, amap):
        with pytest.raises(FormatError, match="magic"):
            decode_map(b"XMAQ" + encode_map(amap)[4:])

    def test_future_version(self, amap):
        buf = bytearray(encode_map(amap))
        buf[4:6] = struct.pack("<H", 2)
        with pytest.raises(FormatError, match="version 2"):
            decode_map(bytes(buf))

    def test_truncated(self, amap):
        with pytest.raises(FormatError):
            decode_map(encode_map(amap)[:-3])
        with pytest.raises(FormatError):
            decode_map(encode_map(amap)[:9])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.xmap"):
            load_map(tmp_path / "nope.xmap")


class TestCsv:
    def test_quoting_and_nan(self, tmp_path):
        path = tmp_path / "t.csv"
        write_csv(path, ["a", "b"], [("x, y", 0.5), ('say "hi"', float("nan"))])
        rows = read_csv(path)
        assert rows[0] == {"a": "x, y", "b": "0.5"}
        assert rows[1]["a"] == 'say "hi"' and rows[1]["b"] == "nan"

    def test_floats_round_trip(self, tmp_path):
        v = 0.1 + 0.2
        write_csv(tmp_path / "f.csv", ["v"], [(v,)])
        assert float(read_csv(tmp_path / "f.csv")[0]["v"]) == v


def _png(buf: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(buf)).convert("RGB"))


class TestHeatmap:
    def test_endpoints(self):
        rgb = colormap(np.array([0.0, 1.0]))
        np.testing.assert_array_equal(rgb, [[0, 0, 255], [255, 0, 0]])

    def test_dimensions_scale(self, amap):
        img = _png(render_heatmap(amap, HeatmapRender(scale=3)))
        assert img.shape == (96, 96, 3)

    def test_top_fraction_count(self):
        agg = np.random.default_rng(1).uniform(size=64)
        assert len(top_features(agg, 0.1)) == 7
        assert len(top_features(agg, 1.0)) == 64

    def test_ties_prefer_lower_index(self):
        agg = np.array([1.0, 3.0, 2.0, 2.0, 2.0, 0.0])
        np.testing.assert_array_equal(top_features(agg, 0.5), [1, 2, 3])

    def test_mask_keeps_whole_patches(self, amap):
        part = PatchPartition.default(32, 32)
        mask = top_mask(amap.scores, 0.1, part)
        assert mask.sum() == 7 * 16
        img = _png(render_heatmap(amap, HeatmapRender(q=0.1, scale=1), partition=part))
        np.testing.assert_array_equal(img[..., 0] == 255, mask)

    def test_pixel_mask(self, amap):
        assert top_mask(amap.scores, 0.1, pixel=True).sum() == 103

    def test_all_equal_warns(self):
        with pytest.warns(RuntimeWarning, match="all-equal"):
            img = _png(render_heatmap(np.ones((4, 4)), HeatmapRender(scale=1)))
        assert len(np.unique(img.reshape(-1, 3), axis=0)) == 1
        np.testing.assert_array_equal(img[0, 0], colormap(np.array(0.5)))

    def test_overlay_needs_matching_image(self, amap):
        with pytest.raises(ValueError):
            render_heatmap(amap, HeatmapRender(overlay=True), image=np.zeros((3, 16, 16)))
        img = _png(render_heatmap(amap, HeatmapRender(overlay=True, scale=1), image=np.zeros((3, 32, 32))))
        assert img.shape == (32, 32, 3)

    def test_rejects_nonfinite_and_bad_q(self):
        with pytest.raises(ValueError):
            render_heatmap(np.full((4, 4), np.nan))
        with pytest.raises(ValueError):
            HeatmapRender(q=0.0)
