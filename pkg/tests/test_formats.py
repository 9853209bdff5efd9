"""
Tests for the on-disk formats: Netpbm images, CSV manifests and checkpoints.
"""
import struct

import numpy as np
import pytest

from classifier_attention.attention import LocalClassifierBank
from classifier_attention.backbone import IdentityBackbone
from classifier_attention.exceptions import CheckpointFormatError, ImageFormatError, ManifestError
from classifier_attention.formats.checkpoint import dumps_checkpoint, loads_checkpoint, read_checkpoint, write_checkpoint
from classifier_attention.formats.manifest import SampleRecord, read_manifest, write_manifest
from classifier_attention.formats.netpbm import read_image, to_bytes, write_image
from classifier_attention.losses import ObjectClassifier
from classifier_attention.multiscale import MultiScaleModel, ScaleModel, initialize_scale


class TestNetpbm:

    @pytest.mark.parametrize("channels,magic", [(1, b"P5"), (3, b"P6")])
    def test_round_trip_bytes(self, tmp_path, rng, channels, magic):
        pixels = rng.integers(0, 256, size=(channels, 5, 7)).astype(np.float64) / 255.0
        write_image(tmp_path / "a.pnm", pixels)
        data = (tmp_path / "a.pnm").read_bytes()
        assert data.startswith(magic + b"\n7 5\n255\n")
        back = read_image(tmp_path / "a.pnm")
        np.testing.assert_array_equal(to_bytes(back), to_bytes(pixels))
        write_image(tmp_path / "b.pnm", back)
        assert (tmp_path / "b.pnm").read_bytes() == data

    def test_header_comments(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n# depth\n255\n\x00\xff")
        np.testing.assert_array_equal(read_image(path), [[[0.0, 1.0]]])

    def test_rounding_half_up(self):
        assert to_bytes(np.array([0.5])).tolist() == [128]

    def test_unsupported_maxval(self, tmp_path):
        path = tmp_path / "deep.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(ImageFormatError, match="unsupported maxval") as info:
            read_image(path)
        assert info.value.field == "maxval"

    def test_ascii_magic(self, tmp_path):
        path = tmp_path / "ascii.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(ImageFormatError, match="unsupported magic"):
            read_image(path)

    def test_truncated_raster(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 11)
        with pytest.raises(ImageFormatError, match="truncated raster"):
            read_image(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "stub.pgm"
        path.write_bytes(b"P5\n4 ")
        with pytest.raises(ImageFormatError, match="truncated header"):
            read_image(path)

    def test_write_rejects_two_channels(self, tmp_path):
        with pytest.raises(ValueError):
            write_image(tmp_path / "x.pnm", np.zeros((2, 2, 2)))


class TestManifest:

    def test_empty_manifest(self, tmp_path):
        write_manifest(tmp_path / "m.csv", [])
        assert (tmp_path / "m.csv").read_text() == "path,label,x0,y0,x1,y1\n"
        assert read_manifest(tmp_path / "m.csv") == []

    def test_round_trip(self, tmp_path, rng):
        records = []
        for i in range(400):
            x0, y0 = (int(v) for v in rng.integers(0, 40, size=2))
            records.append(SampleRecord(f"train/img_{i:05d}.ppm", i % 4, x0, y0, x0 + 15, y0 + 15))
        write_manifest(tmp_path / "m.csv", records)
        assert read_manifest(tmp_path / "m.csv") == records

    def test_unordered_box_reports_line(self, tmp_path):
        (tmp_path / "m.csv").write_text("path,label,x0,y0,x1,y1\na.ppm,0,1,1,2,2\nb.ppm,1,5,0,4,3\n")
        with pytest.raises(ManifestError) as info:
            read_manifest(tmp_path / "m.csv")
        assert info.value.line == 3
        assert info.value.field == "bbox"
        assert str(info.value).startswith("line 3:")

    @pytest.mark.parametrize("row", ["a.ppm,0,1,1,2", "a.ppm,x,1,1,2,2", "a.ppm,-1,1,1,2,2"])
    def test_malformed_rows(self, tmp_path, row):
        (tmp_path / "m.csv").write_text(f"path,label,x0,y0,x1,y1\n{row}\n")
        with pytest.raises(ManifestError) as info:
            read_manifest(tmp_path / "m.csv")
        assert info.value.line == 2

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("file,label\n")
        with pytest.raises(ManifestError, match="line 1"):
            read_manifest(tmp_path / "m.csv")


@pytest.fixture
def two_scale_model(tiny_config):
    scales = [initialize_scale([], tiny_config, seed=1, scale_index=i)[0] for i in range(2)]
    return MultiScaleModel(scales)


class TestCheckpoint:

    def test_bytes_reproduced(self, two_scale_model):
        data = dumps_checkpoint(two_scale_model)
        assert data[:4] == b"ACAM"
        assert struct.unpack("<II", data[4:12]) == (1, 2)
        assert dumps_checkpoint(loads_checkpoint(data)) == data

    def test_weights_restored(self, tmp_path, two_scale_model):
        write_checkpoint(tmp_path / "m.ckpt", two_scale_model)
        loaded = read_checkpoint(tmp_path / "m.ckpt")
        for a, b in zip(two_scale_model.scales, loaded.scales):
            pa, pb = a.parameters(), b.parameters()
            assert pa.keys() == pb.keys()
            for k in pa:
                np.testing.assert_array_equal(pa[k], pb[k])
        assert loaded.scales[1].scale_index == 1

    def test_frozen_flag(self, two_scale_model):
        loaded = loads_checkpoint(dumps_checkpoint(two_scale_model), frozen_backbone=True)
        assert all(s.backbone.frozen for s in loaded.scales)

    def test_identity_backbone_scale(self, rng):
        scale = ScaleModel(IdentityBackbone(5), LocalClassifierBank.initialize(2, 3, 5, rng), ObjectClassifier.initialize(3, 5, rng))
        loaded = loads_checkpoint(dumps_checkpoint(MultiScaleModel([scale])))
        assert isinstance(loaded.scales[0].backbone, IdentityBackbone)
        assert loaded.scales[0].backbone.out_channels == 5

    def test_bad_magic(self, two_scale_model):
        data = b"XXXX" + dumps_checkpoint(two_scale_model)[4:]
        with pytest.raises(CheckpointFormatError, match="bad magic") as info:
            loads_checkpoint(data)
        assert info.value.category == "checkpoint-format"

    def test_truncated(self, two_scale_model):
        data = dumps_checkpoint(two_scale_model)
        with pytest.raises(CheckpointFormatError, match="truncated"):
            loads_checkpoint(data[:-8])

    def test_trailing_bytes(self, two_scale_model):
        with pytest.raises(CheckpointFormatError, match="trailing"):
            loads_checkpoint(dumps_checkpoint(two_scale_model) + b"\0")

    def test_unsupported_version(self, two_scale_model):
        data = bytearray(dumps_checkpoint(two_scale_model))
        data[4:8] = struct.pack("<I", 9)
        with pytest.raises(CheckpointFormatError, match="unsupported version 9"):
            loads_checkpoint(bytes(data))
