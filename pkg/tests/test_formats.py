"""File round trips and header validation for both volume formats."""

import struct

import numpy as np
import pytest

from cellinr import formats
from cellinr.volume import Volume3D


@pytest.fixture
def small_volume():
    rng = np.random.default_rng(17)
    data = rng.uniform(0, 1, size=(5, 4, 3)).astype(np.float32)
    data.flat[0] = 0.0
    data.flat[1] = 1.0
    return Volume3D(data, (0.18, 0.18, 0.5), (0.0, 1.0))


class TestRawSidecar:
    def test_f32_round_trip_bit_exact(self, small_volume, tmp_path):
        path = tmp_path / "v.raw"
        formats.save_volume(small_volume, path, dtype="f32")
        back = formats.load_volume(path)
        assert np.array_equal(back.data, small_volume.data)
        assert back.spacing == small_volume.spacing  # repr round trip is exact

    @pytest.mark.parametrize("dtype,scale", [("u8", 255.0), ("u16", 65535.0)])
    def test_quantized_round_trip(self, small_volume, tmp_path, dtype, scale):
        path = tmp_path / "v.raw"
        formats.save_volume(small_volume, path, dtype=dtype)
        back = formats.load_volume(path)
        assert np.max(np.abs(back.data - small_volume.data)) <= 0.5 / scale + 1e-7
        assert back.intensity_range == (0.0, scale)

    def test_half_quantizes_bankers(self, tmp_path):
        v = Volume3D(np.full((1, 1, 1), 0.5))
        path = tmp_path / "v.raw"
        formats.save_volume(v, path, dtype="u8")
        # 0.5 * 255 = 127.5; round-half-to-even picks 128
        assert path.read_bytes() == b"\x80"

    def test_constant_payload_without_range_is_degenerate(self, tmp_path):
        path = tmp_path / "flat.raw"
        path.write_bytes(bytes([100] * 8))
        (tmp_path / "flat.raw.meta").write_text("dims = 2 2 2\ndtype = u8\n")
        v = formats.load_volume(path)
        assert np.all(v.data == 0.0)
        assert v.intensity_range == (100.0, 100.0)

    def test_minmax_normalization_endpoints(self, tmp_path):
        path = tmp_path / "grad.raw"
        payload = np.array([0, 65535, 32768, 1, 2, 3, 4, 5], dtype="<u2")
        path.write_bytes(payload.tobytes())
        (tmp_path / "grad.raw.meta").write_text("dims = 2 2 2\ndtype = u16\n")
        v = formats.load_volume(path)
        flat = v.data.reshape(-1, order="F")
        assert flat[0] == 0.0
        assert flat[1] == 1.0
        assert flat[2] == pytest.approx(0.5, abs=1e-4)

    def test_order_preservation(self, tmp_path):
        rng = np.random.default_rng(3)
        payload = rng.integers(0, 255, size=27, dtype=np.uint8)
        path = tmp_path / "v.raw"
        path.write_bytes(payload.tobytes())
        (tmp_path / "v.raw.meta").write_text("dims = 3 3 3\ndtype = u8\n")
        v = formats.load_volume(path)
        flat = v.data.reshape(-1, order="F")
        order = np.argsort(payload, kind="stable")
        assert np.all(np.diff(flat[order]) >= 0.0)

    def test_spacing_default_and_range_key(self, tmp_path):
        path = tmp_path / "v.raw"
        path.write_bytes(np.full(8, 64, dtype=np.uint8).tobytes())
        (tmp_path / "v.raw.meta").write_text("dims = 2 2 2\ndtype = u8\nrange = 0 255\n")
        v = formats.load_volume(path)
        assert v.spacing == (1.0, 1.0, 1.0)
        assert float(v.data[0, 0, 0]) == pytest.approx(64 / 255, abs=1e-6)

    def test_errors(self, tmp_path):
        path = tmp_path / "v.raw"
        path.write_bytes(b"\x00" * 8)
        with pytest.raises(formats.FormatError):
            formats.load_volume(path)  # sidecar missing
        meta = tmp_path / "v.raw.meta"
        meta.write_text("dtype = u8\n")
        with pytest.raises(formats.FormatError):
            formats.load_volume(path)  # dims missing
        meta.write_text("dims = 2 2 2\ndtype = i32\n")
        with pytest.raises(formats.UnsupportedDtypeError):
            formats.load_volume(path)
        meta.write_text("dims = 3 3 3\ndtype = u8\n")
        with pytest.raises(formats.TruncationError):
            formats.load_volume(path)  # 8 bytes for 27 voxels
        meta.write_text("dims = 2 2 2\ndtype = u8\nbroken line\n")
        with pytest.raises(formats.FormatError):
            formats.load_volume(path)


def nifti_header(dims=(2, 2, 2), datatype=2, bitpix=8, vox_offset=352.0,
                 magic=b"n+1\x00", pixdim=(1.0, 1.0, 1.0), sizeof=348,
                 scl=(1.0, 0.0), cal=(0.0, 0.0), ndim=3, extra_dim=1):
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, sizeof)
    struct.pack_into("<8h", hdr, 40, ndim, *dims, extra_dim, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, vox_offset, *scl)
    struct.pack_into("<2f", hdr, 124, cal[1], cal[0])  # cal_max, cal_min
    hdr[344:348] = magic
    return bytes(hdr)


def write_nifti(path, header, payload=b"", pad=b"\x00" * 4):
    path.write_bytes(header + pad + payload)


class TestNifti:
    def test_f32_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        v = Volume3D(rng.uniform(0, 1, size=(6, 5, 4)).astype(np.float32), (0.5, 0.25, 2.0))
        path = tmp_path / "v.nii"
        formats.save_volume(v, path, dtype="f32")
        back = formats.load_volume(path)
        assert np.array_equal(back.data, v.data)
        assert back.spacing == v.spacing  # chosen spacings are exact in f32

    def test_u8_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        v = Volume3D(rng.uniform(0, 1, size=(4, 4, 4)).astype(np.float32))
        path = tmp_path / "v.nii"
        formats.save_volume(v, path, dtype="u8")
        back = formats.load_volume(path)
        assert np.max(np.abs(back.data - v.data)) <= 0.5 / 255 + 1e-7
        assert back.intensity_range == (0.0, 255.0)

    def test_cal_range_overrides_minmax(self, tmp_path):
        payload = np.array([0, 64, 128, 255, 10, 20, 30, 40], dtype=np.uint8)
        hdr = nifti_header(cal=(0.0, 255.0))
        path = tmp_path / "v.nii"
        write_nifti(path, hdr, payload.tobytes())
        v = formats.load_volume(path)
        assert float(v.data.reshape(-1, order="F")[1]) == pytest.approx(64 / 255, abs=1e-6)

    def test_scl_slope_warns_but_loads(self, tmp_path, caplog):
        payload = bytes(8)
        hdr = nifti_header(scl=(2.0, 5.0))
        path = tmp_path / "v.nii"
        write_nifti(path, hdr, payload)
        with caplog.at_level("WARNING", logger="cellinr.formats"):
            formats.load_volume(path)
        assert any("scl_slope" in r.message for r in caplog.records)

    def test_nonpositive_pixdim_warns_and_defaults(self, tmp_path, caplog):
        hdr = nifti_header(pixdim=(0.0, 1.0, 1.0))
        path = tmp_path / "v.nii"
        write_nifti(path, hdr, bytes(8))
        with caplog.at_level("WARNING", logger="cellinr.formats"):
            v = formats.load_volume(path)
        assert v.spacing == (1.0, 1.0, 1.0)

    def test_trailing_singleton_dim_accepted(self, tmp_path):
        hdr = nifti_header(ndim=4, extra_dim=1)
        path = tmp_path / "v.nii"
        write_nifti(path, hdr, bytes(8))
        assert formats.load_volume(path).dims == (2, 2, 2)

    def test_real_4d_rejected(self, tmp_path):
        hdr = nifti_header(ndim=4, extra_dim=2)
        path = tmp_path / "v.nii"
        write_nifti(path, hdr, bytes(16))
        with pytest.raises(formats.FormatError):
            formats.load_volume(path)

    def test_header_errors(self, tmp_path):
        path = tmp_path / "v.nii"
        path.write_bytes(b"short")
        with pytest.raises(formats.FormatError):
            formats.load_volume(path)
        write_nifti(path, nifti_header(sizeof=1543569408), bytes(8))
        with pytest.raises(formats.FormatError, match="big-endian"):
            formats.load_volume(path)
        write_nifti(path, nifti_header(magic=b"ni1\x00"), bytes(8))
        with pytest.raises(formats.FormatError, match="two-file"):
            formats.load_volume(path)
        write_nifti(path, nifti_header(magic=b"abcd"), bytes(8))
        with pytest.raises(formats.FormatError):
            formats.load_volume(path)
        write_nifti(path, nifti_header(datatype=8, bitpix=32), bytes(32))
        with pytest.raises(formats.UnsupportedDtypeError):
            formats.load_volume(path)
        write_nifti(path, nifti_header(bitpix=16), bytes(8))
        with pytest.raises(formats.FormatError, match="bitpix"):
            formats.load_volume(path)
        write_nifti(path, nifti_header(), bytes(4))
        with pytest.raises(formats.TruncationError):
            formats.load_volume(path)

    def test_compressed_rejected(self, tmp_path):
        path = tmp_path / "v.nii.gz"
        path.write_bytes(b"\x1f\x8b")
        with pytest.raises(formats.FormatError):
            formats.load_volume(path)


class TestFormatSelection:
    def test_explicit_format_overrides_extension(self, small_volume, tmp_path):
        path = tmp_path / "volume.bin"
        formats.save_volume(small_volume, path, format="raw", dtype="f32")
        back = formats.load_volume(path, format="raw")
        assert np.array_equal(back.data, small_volume.data)
        with pytest.raises(formats.FormatError):
            formats.load_volume(path, format="nifti")

    def test_unknown_format_token(self, small_volume, tmp_path):
        with pytest.raises(ValueError):
            formats.save_volume(small_volume, tmp_path / "x", format="tiff")

    def test_unsupported_save_dtype(self, small_volume, tmp_path):
        with pytest.raises(formats.UnsupportedDtypeError):
            formats.save_volume(small_volume, tmp_path / "x.raw", dtype="i64")
