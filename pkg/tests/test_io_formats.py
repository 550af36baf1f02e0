import gzip
import struct

import numpy as np
import pytest

from lobeseg.io_formats import (
    Checkpoint,
    FormatError,
    IncompatibleVersionError,
    LengthError,
    UnsupportedFeatureError,
    decode_checkpoint,
    decode_volume,
    encode_checkpoint,
    encode_volume,
    load_checkpoint,
    parse_nifti1,
    read_any_volume,
    read_nifti1,
    read_volume,
    save_checkpoint,
    write_volume,
)
from lobeseg.kernels import DimensionError
from lobeseg.preprocess import VOCABULARY, LabelMap, Volume
from lobeseg.trainer import make_checkpoint, TrainState, LRScheduleState, OptimizerState, TrainConfig
from lobeseg.vnet import ModelConfig, VNet

# 1x1x2 label map [0, 7], spacing (1, 1, 2), written out by hand
GOLDEN_LABELS = bytes.fromhex(
    "564c4256"              # magic VLBV
    "01000000"              # version 1
    "01"                    # kind: label map
    "01"                    # dtype: u8
    "01000000" "01000000" "02000000"  # dims
    "0000803f" "0000803f" "00000040"  # spacing 1.0, 1.0, 2.0
    "0007"                  # payload
)

# 1x1x1 volume [-1000.0], spacing (0.5, 0.5, 0.5)
GOLDEN_VOLUME = bytes.fromhex(
    "564c4256" "01000000" "00" "00" "01000000" "01000000" "01000000"
    "0000003f" "0000003f" "0000003f" "00007ac4"
)


def nifti_bytes(dim, datatype, data: bytes, pixdim=(1.0, 1.0, 1.0), slope=0.0, inter=0.0, endian="<",
                magic=b"n+1\x00", vox_offset=352.0):
    """Header built from the public NIfTI-1 field offsets."""
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    struct.pack_into(endian + "8h", hdr, 40, *dim)
    bitpix = {4: 16, 16: 32, 2: 8}[datatype]
    struct.pack_into(endian + "2h", hdr, 70, datatype, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *pixdim, 0, 0, 0, 0)
    struct.pack_into(endian + "f", hdr, 108, vox_offset)
    struct.pack_into(endian + "2f", hdr, 112, slope, inter)
    hdr[344:348] = magic
    return bytes(hdr) + b"\x00" * 4 + data


class TestNativeVolume:
    def test_golden_label_bytes(self, tmp_path):
        lm = LabelMap(np.array([0, 7], np.uint8).reshape(1, 1, 2), VOCABULARY, (1.0, 1.0, 2.0))
        assert encode_volume(lm) == GOLDEN_LABELS
        p = tmp_path / "l.vol"
        p.write_bytes(GOLDEN_LABELS)
        back = read_volume(p)
        assert isinstance(back, LabelMap)
        np.testing.assert_array_equal(back.voxels.ravel(), [0, 7])
        assert back.spacing == (1.0, 1.0, 2.0)

    def test_golden_volume_bytes(self):
        v = Volume(np.array([-1000.0]).reshape(1, 1, 1), (0.5, 0.5, 0.5))
        assert encode_volume(v) == GOLDEN_VOLUME
        assert decode_volume(GOLDEN_VOLUME).voxels.item() == -1000.0

    def test_file_size_2x2x2(self, tmp_path):
        p = tmp_path / "v.vol"
        write_volume(p, Volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0)))
        assert p.stat().st_size == 4 + 4 + 1 + 1 + 12 + 12 + 32 == 66

    def test_round_trip_bitwise(self, tmp_path, rng):
        v = Volume(rng.normal(size=(3, 4, 5)).astype(np.float32), (0.7, 0.8, 1.25))
        p = tmp_path / "v.vol"
        write_volume(p, v)
        back = read_volume(p)
        assert back.voxels.tobytes() == v.voxels.tobytes()
        assert back.dims == v.dims
        assert np.float32(back.spacing).tobytes() == np.float32(v.spacing).tobytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.vol"
        p.write_bytes(b"XXXX" + GOLDEN_LABELS[4:])
        with pytest.raises(FormatError):
            read_volume(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.vol"
        p.write_bytes(GOLDEN_LABELS[:-1])
        with pytest.raises(LengthError, match="2") as err:
            read_volume(p)
        assert "1" in str(err.value)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "h.vol"
        p.write_bytes(GOLDEN_LABELS[:10])
        with pytest.raises(LengthError):
            read_volume(p)

    def test_hostile_dims_do_not_allocate(self, tmp_path):
        hdr = struct.pack("<4sIBB3I3f", b"VLBV", 1, 0, 0, 60000, 60000, 60000, 1, 1, 1)
        p = tmp_path / "big.vol"
        p.write_bytes(hdr + b"\x00" * 8)
        with pytest.raises(LengthError):
            read_volume(p)

    def test_version_mismatch(self):
        bad = GOLDEN_LABELS[:4] + struct.pack("<I", 9) + GOLDEN_LABELS[8:]
        with pytest.raises(FormatError):
            decode_volume(bad)

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError, match="missing"):
            write_volume(tmp_path / "missing" / "v.vol", Volume(np.zeros((1, 1, 1))))


class TestNifti:
    def test_crafted_float_header(self, tmp_path):
        data = np.arange(64, dtype="<f4")
        raw = nifti_bytes((3, 4, 4, 4, 1, 1, 1, 1), 16, data.tobytes(), pixdim=(0.7, 0.8, 2.5))
        p = tmp_path / "a.nii"
        p.write_bytes(raw)
        v = read_nifti1(p)
        assert v.dims == (4, 4, 4)
        assert v.spacing == pytest.approx((0.7, 0.8, 2.5))
        # x fastest on disk
        assert v.voxels[1, 0, 0] == 1.0 and v.voxels[0, 1, 0] == 4.0 and v.voxels[0, 0, 1] == 16.0

    def test_scaling_int16(self):
        raw = nifti_bytes((3, 2, 1, 1, 1, 1, 1, 1), 4, np.array([24, 1024], "<i2").tobytes(),
                          slope=1.0, inter=-1024.0)
        v = parse_nifti1(raw)
        np.testing.assert_array_equal(v.voxels.ravel(), [-1000.0, 0.0])

    def test_zero_slope_means_no_scaling(self):
        raw = nifti_bytes((3, 1, 1, 1, 1, 1, 1, 1), 4, np.array([24], "<i2").tobytes(), slope=0.0, inter=-1024.0)
        assert parse_nifti1(raw).voxels.item() == 24.0

    def test_big_endian(self):
        raw = nifti_bytes((3, 2, 1, 1, 1, 1, 1, 1), 16, np.array([1.5, -2.0], ">f4").tobytes(), endian=">")
        np.testing.assert_array_equal(parse_nifti1(raw).voxels.ravel(), [1.5, -2.0])

    def test_gzip(self, tmp_path):
        raw = nifti_bytes((3, 2, 2, 2, 1, 1, 1, 1), 16, np.ones(8, "<f4").tobytes())
        p = tmp_path / "a.nii.gz"
        p.write_bytes(gzip.compress(raw))
        v = read_any_volume(p)
        assert v.dims == (2, 2, 2) and np.all(v.voxels == 1)

    def test_four_dims_unsupported(self):
        raw = nifti_bytes((4, 2, 2, 2, 2, 1, 1, 1), 16, np.zeros(16, "<f4").tobytes())
        with pytest.raises(UnsupportedFeatureError):
            parse_nifti1(raw)

    def test_datatype_unsupported(self):
        raw = nifti_bytes((3, 2, 2, 2, 1, 1, 1, 1), 2, np.zeros(8, "u1").tobytes())
        with pytest.raises(UnsupportedFeatureError):
            parse_nifti1(raw)

    def test_bad_magic(self):
        raw = nifti_bytes((3, 1, 1, 1, 1, 1, 1, 1), 16, b"\x00" * 4, magic=b"abcd")
        with pytest.raises(FormatError):
            parse_nifti1(raw)

    def test_truncated_data(self):
        raw = nifti_bytes((3, 4, 4, 4, 1, 1, 1, 1), 16, b"\x00" * 16)
        with pytest.raises(LengthError):
            parse_nifti1(raw)


@pytest.fixture
def checkpoint():
    model = VNet(ModelConfig(input_size=8, depth=2, base_channels=2))
    state = TrainState(3, LRScheduleState(0.001, 0.5, 7), OptimizerState("adam", 12, {
        "in.conv.weight.m": np.ones((2, 1, 3, 3, 3), np.float32)}), [{"epoch": 1}])
    return model, make_checkpoint(model, state, TrainConfig(epochs=5))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, checkpoint):
        model, ck = checkpoint
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, ck)
        back = load_checkpoint(p)
        assert back.epoch == 3 and back.lr_state == ck.lr_state
        assert set(back.arrays) == set(model.state_arrays())
        for k, v in ck.arrays.items():
            assert back.arrays[k].tobytes() == np.asarray(v, np.float32).tobytes()
        np.testing.assert_array_equal(back.optimizer_arrays["in.conv.weight.m"], 1.0)

    def test_save_load_save_identical(self, tmp_path, checkpoint):
        _, ck = checkpoint
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, ck)
        save_checkpoint(b, load_checkpoint(a))
        assert a.read_bytes() == b.read_bytes()

    def test_version_mismatch(self, checkpoint):
        raw = bytearray(encode_checkpoint(checkpoint[1]))
        raw[4:8] = struct.pack("<I", 99)
        with pytest.raises(IncompatibleVersionError):
            decode_checkpoint(bytes(raw))

    def test_bad_magic_and_truncation(self, checkpoint):
        raw = encode_checkpoint(checkpoint[1])
        with pytest.raises(FormatError):
            decode_checkpoint(b"NOPE" + raw[4:])
        with pytest.raises(LengthError):
            decode_checkpoint(raw[:-10])

    def test_mismatched_model_names_parameter(self, checkpoint):
        _, ck = checkpoint
        other = VNet(ModelConfig(input_size=8, depth=2, base_channels=4))
        with pytest.raises(DimensionError, match=r"\.weight|\.gamma|\.slope"):
            other.load_state_arrays(decode_checkpoint(encode_checkpoint(ck)).arrays)

    def test_every_parameter_once(self, checkpoint):
        model, ck = checkpoint
        names = [k for k in ck.arrays]
        assert len(names) == len(set(names))
        assert set(model.params) <= set(names)

    def test_plain_checkpoint(self):
        ck = Checkpoint({"a": 1}, {"w": np.arange(3, dtype=np.float32)})
        back = decode_checkpoint(encode_checkpoint(ck))
        np.testing.assert_array_equal(back.arrays["w"], [0, 1, 2])
