import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from darkvid import frameio


def test_pfb_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    frame = rng.uniform(0, 1, (3, 7, 5)).astype(np.float32)
    path = tmp_path / "f.pfb"
    frameio.write_pfb(path, frame)
    back = frameio.read_pfb(path)
    assert back.tobytes() == frame.tobytes()
    assert back.shape == frame.shape


@settings(max_examples=25, deadline=None)
@given(c=st.sampled_from([1, 3]), h=st.integers(1, 16), w=st.integers(1, 16),
       seed=st.integers(0, 10**6))
def test_pfb_roundtrip_property(tmp_path_factory, c, h, w, seed):
    frame = np.random.default_rng(seed).standard_normal((c, h, w)).astype(np.float32)
    path = tmp_path_factory.mktemp("pfb") / "f.pfb"
    frameio.write_pfb(path, frame)
    assert np.array_equal(frameio.read_pfb(path), frame)


def test_pfb_truncated_file_names_lengths(tmp_path):
    path = tmp_path / "f.pfb"
    frameio.write_pfb(path, np.zeros((1, 4, 4), dtype=np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(frameio.FrameFormatError, match="expected 64 bytes.*got 56"):
        frameio.read_pfb(path)


def test_pfb_bad_magic_offset_zero(tmp_path):
    path = tmp_path / "f.pfb"
    path.write_bytes(b"JUNK" + b"\x00" * 16)
    with pytest.raises(frameio.FrameFormatError, match="magic") as ei:
        frameio.read_pfb(path)
    assert ei.value.offset == 0


def test_pfb_rejects_non_finite(tmp_path):
    bad = np.full((1, 2, 2), np.nan, dtype=np.float32)
    with pytest.raises(frameio.FrameFormatError, match="finite"):
        frameio.write_pfb(tmp_path / "f.pfb", bad)


def test_png_8bit_exact_values(tmp_path):
    path = tmp_path / "g.png"
    Image.fromarray(np.full((4, 4), 128, dtype=np.uint8), mode="L").save(path)
    frame = frameio.read_png(path)
    assert frame.shape == (1, 4, 4)
    assert np.all(frame == np.float32(128) / np.float32(255))


def test_png_rgb_roundtrip_quantized(tmp_path):
    rng = np.random.default_rng(1)
    frame = (rng.integers(0, 256, (3, 8, 8)) / 255.0).astype(np.float32)
    path = tmp_path / "c.png"
    frameio.write_png(path, frame)
    back = frameio.read_png(path)
    assert back.shape == (3, 8, 8)
    assert np.allclose(back, frame, atol=1 / 255 / 2 + 1e-7)


def test_png_16bit(tmp_path):
    path = tmp_path / "d.png"
    Image.fromarray(np.full((4, 4), 32768, dtype=np.uint16)).save(path)
    frame = frameio.read_png(path)
    assert np.allclose(frame, 32768 / 65535)


def test_read_frame_dispatch(tmp_path):
    with pytest.raises(frameio.FrameFormatError, match="extension"):
        frameio.read_frame(tmp_path / "x.jpg")
