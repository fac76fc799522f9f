import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from portraitkit.images import (ImageNotFoundError, ImageWriteError, TruncatedImageError, UnsupportedImageError,
                                check_image, check_mask, decode, encode, load_image, load_mask, quantize,
                                resize_bilinear, save_image)


def test_pgm_max_value(tmp_path):
    p = tmp_path / "one.pgm"
    p.write_bytes(b"P5\n1 1\n255\n\xff")
    img = load_image(p)
    assert img.shape == (1, 1, 1)
    assert img[0, 0, 0] == 1.0


def test_ppm_linear_normalization(tmp_path):
    p = tmp_path / "one.ppm"
    p.write_bytes(b"P6\n1 1\n255\n" + bytes([0, 128, 255]))
    assert load_image(p)[0, 0].tolist() == [0.0, 128 / 255, 1.0]


def test_pnm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\x80")
    assert load_image(p)[0, :, 0].tolist() == [0.0, 128 / 255]


def test_quantization_rules():
    assert quantize(np.array([1.0]))[0] == 255
    assert quantize(np.array([0.5]))[0] == 128  # 127.5 rounds away from zero
    # float residue around the tie must not flip the byte
    assert quantize(np.array([0.5 - 1e-16, 0.5 + 1e-16, 0.5])).tolist() == [128, 128, 128]
    assert quantize(np.array([-0.3, 1.7])).tolist() == [0, 255]  # clamped first


@pytest.mark.parametrize("ext", [".png", ".pgm", ".ppm"])
def test_roundtrip_within_half_step(tmp_path, rng, ext):
    c = 1 if ext == ".pgm" else 3
    img = rng.random((7, 5, c))
    save_image(img, tmp_path / f"x{ext}")
    back = load_image(tmp_path / f"x{ext}")
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1 / 510 + 1e-15


grids = st.tuples(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3])).flatmap(
    lambda s: arrays(np.uint8, s))


@settings(max_examples=40, deadline=None)
@given(grids, st.sampled_from([".png", ".pnm"]))
def test_quantized_grids_roundtrip_exactly(tmp_path_factory, q, ext):
    d = tmp_path_factory.mktemp("rt")
    img = q.astype(np.float64) / 255.0
    save_image(img, d / f"a{ext}")
    back = load_image(d / f"a{ext}")
    assert np.array_equal(back, img)
    save_image(back, d / f"b{ext}")
    assert (d / f"a{ext}").read_bytes() == (d / f"b{ext}").read_bytes()


def test_missing_file(tmp_path):
    with pytest.raises(ImageNotFoundError):
        load_image(tmp_path / "nope.png")


def test_sixteen_bit_pnm_rejected(tmp_path):
    p = tmp_path / "deep.pgm"
    p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(UnsupportedImageError):
        load_image(p)


def test_sixteen_bit_png_rejected(tmp_path):
    p = tmp_path / "deep.png"
    Image.fromarray(np.full((2, 2), 1000, dtype=np.uint16)).save(p)
    with pytest.raises(UnsupportedImageError):
        load_image(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "short.ppm"
    p.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(TruncatedImageError):
        load_image(p)


def test_truncated_png(tmp_path, rng):
    p = tmp_path / "full.png"
    save_image(rng.random((16, 16, 3)), p)
    raw = p.read_bytes()
    cut = tmp_path / "cut.png"
    cut.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedImageError):
        load_image(cut)


def test_errors_are_distinct():
    kinds = {ImageNotFoundError, UnsupportedImageError, TruncatedImageError, ImageWriteError}
    assert len(kinds) == 4
    assert not issubclass(TruncatedImageError, UnsupportedImageError)


def test_unknown_format(tmp_path):
    p = tmp_path / "x.bmp"
    p.write_bytes(b"BM" + bytes(40))
    with pytest.raises(UnsupportedImageError):
        load_image(p)


def test_unwritable_path(tmp_path):
    with pytest.raises(ImageWriteError):
        save_image(np.zeros((1, 1, 1)), tmp_path / "missing_dir" / "x.png")


def test_check_image_rejects_bad_input():
    with pytest.raises(ValueError):
        check_image(np.full((2, 2, 3), np.nan))
    with pytest.raises(ValueError):
        check_image(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        check_image(np.zeros((2, 2, 2)))
    assert check_image(np.full((2, 2), -0.5), signed=True).shape == (2, 2, 1)


def test_mask_checks(tmp_path):
    with pytest.raises(ValueError):
        check_mask(np.full((2, 2), 1.2))
    with pytest.raises(ValueError):
        check_mask(np.ones((2, 2)), (3, 3, 1))
    save_image(np.ones((2, 2, 3)), tmp_path / "rgb.png")
    with pytest.raises(UnsupportedImageError):
        load_mask(tmp_path / "rgb.png")


def test_resize_constant():
    img = np.full((5, 7, 3), 0.3)
    for h, w in [(1, 1), (9, 4), (13, 21)]:
        assert np.allclose(resize_bilinear(img, h, w), 0.3, atol=1e-15)
    up = resize_bilinear(img, 20, 30)
    assert np.allclose(resize_bilinear(up, 5, 7), 0.3, atol=1e-15)


def test_resize_midpoint():
    img = np.array([[0.0, 1.0], [0.0, 1.0]])[:, :, None]
    out = resize_bilinear(img, 2, 1)
    assert out.shape == (2, 1, 1)
    assert np.allclose(out, 0.5, atol=1e-15)


def test_resize_same_size_is_identity(rng):
    img = rng.random((6, 4, 3))
    out = resize_bilinear(img, 6, 4)
    assert np.max(np.abs(out - img)) <= 1e-12
    assert out is not img


def test_resize_rejects_empty_target():
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((2, 2, 1)), 0, 3)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8), st.just(3)),
              elements=st.floats(0, 1)),
       st.integers(1, 12), st.integers(1, 12))
def test_resize_preserves_range(img, h, w):
    out = resize_bilinear(img, h, w)
    assert out.min() >= img.min() - 1e-12
    assert out.max() <= img.max() + 1e-12


def test_encode_decode_inverse(rng):
    img = rng.random((4, 4, 3))
    z = encode(img)
    assert z.min() >= -1 and z.max() <= 1
    assert np.allclose(decode(z), img, atol=1e-15)
    assert decode(np.array([3.0, -3.0])).tolist() == [1.0, 0.0]
