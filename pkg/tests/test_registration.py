import numpy as np
import pytest
from scipy import ndimage

from darkvid import registration as reg
from darkvid.registration import AffineTransform


@pytest.fixture(scope="module")
def texture():
    rng = np.random.default_rng(0)
    img = ndimage.gaussian_filter(rng.uniform(0, 1, (192, 192)), 1.5)
    return (img - img.min()) / (img.max() - img.min())


def random_moderate_affine(rng):
    ang = np.deg2rad(rng.uniform(-10, 10))
    s = rng.uniform(0.95, 1.05)
    shift = rng.uniform(-10, 10, 2)
    lin = s * np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    return AffineTransform(np.hstack([lin, shift[:, None]]))


# ---------------------------------------------------------------------------
# transform type

def test_identity_and_inverse():
    t = AffineTransform.identity()
    pts = np.array([[3.0, 4.0], [10.0, -2.0]])
    assert np.array_equal(t.apply(pts), pts)
    m = AffineTransform(np.array([[2.0, 0.0, 5.0], [0.0, 0.5, -1.0]]))
    roundtrip = m.inverse().apply(m.apply(pts))
    assert np.allclose(roundtrip, pts, atol=1e-12)


def test_singular_transform_rejected():
    t = AffineTransform(np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]))
    with pytest.raises(reg.DegenerateGeometryError):
        t.inverse()


def test_transform_text_roundtrip():
    t = AffineTransform(np.array([[1.000000001, -0.25, 12.345678901],
                                  [0.125, 0.99, -7.5]]))
    s = t.to_text()
    assert len(s.split()) == 6
    u = AffineTransform.from_text(s)
    assert np.allclose(u.matrix, t.matrix, atol=1e-9)


# ---------------------------------------------------------------------------
# detection

def test_constant_image_has_no_keypoints():
    with pytest.raises(reg.FeatureError):
        reg.detect_and_describe(np.full((64, 64), 0.5))


def test_checkerboard_corners():
    tile = np.kron([[0, 1] * 8, [1, 0] * 8] * 8, np.ones((8, 8)))[:128, :128]
    kps, descs = reg.detect_and_describe(tile.astype(float))
    assert len(kps) >= 20
    assert descs.shape[1] == 128
    # detected points sit near the 8px corner lattice (corners at 7.5 + 8k)
    d = (kps - 7.5) % 8.0
    dist = np.minimum(d, 8.0 - d)
    frac_on_lattice = np.mean(np.all(dist < 1.5, axis=1))
    assert frac_on_lattice > 0.8


def test_keypoints_track_integer_translation(texture):
    kps_a, _ = reg.detect_and_describe(texture)
    shifted = np.roll(texture, (3, 5), axis=(0, 1))  # +5 in x, +3 in y
    kps_b, _ = reg.detect_and_describe(shifted)
    margin = 20
    inner = kps_a[(kps_a[:, 0] > margin) & (kps_a[:, 0] < 192 - margin)
                  & (kps_a[:, 1] > margin) & (kps_a[:, 1] < 192 - margin)]
    expected = inner + np.array([5.0, 3.0])
    d = np.linalg.norm(expected[:, None, :] - kps_b[None, :, :], axis=2).min(axis=1)
    assert np.mean(d < 0.5) > 0.9


# ---------------------------------------------------------------------------
# affine estimation

def test_estimate_exact_pairs_noiseless():
    rng = np.random.default_rng(1)
    t = random_moderate_affine(rng)
    src = rng.uniform(0, 100, (40, 2))
    dst = t.apply(src)
    est, mask, rms = reg.estimate_affine(src, dst, inlier_tol_px=1.0)
    assert np.allclose(est.matrix, t.matrix, atol=1e-9)
    assert mask.all()
    assert rms < 1e-9


def test_estimate_with_half_gross_outliers():
    rng = np.random.default_rng(2)
    t = random_moderate_affine(rng)
    src = rng.uniform(0, 150, (60, 2))
    dst = t.apply(src)
    n_out = 30
    dst[:n_out] += rng.uniform(20, 80, (n_out, 2)) * rng.choice([-1, 1], (n_out, 2))
    est, mask, rms = reg.estimate_affine(src, dst, iters=800, inlier_tol_px=2.0, seed=3)
    resid = np.linalg.norm(est.apply(src[n_out:]) - t.apply(src[n_out:]), axis=1)
    assert resid.mean() < 0.1
    assert mask[n_out:].sum() == 30


def test_estimate_collinear_points_rejected():
    src = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    with pytest.raises(reg.DegenerateGeometryError):
        reg.estimate_affine(src, src + 1.0)


def test_estimate_too_few_pairs():
    with pytest.raises(reg.DegenerateGeometryError, match=">= 3"):
        reg.estimate_affine(np.zeros((2, 2)), np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# warping

def test_warp_identity_bitwise(texture):
    out, mask = reg.warp_affine(texture, AffineTransform.identity())
    assert np.array_equal(out, texture)
    assert mask.all()


def test_warp_integer_translation_shifts_pixels(texture):
    t = AffineTransform(np.array([[1.0, 0.0, 5.0], [0.0, 1.0, 3.0]]))
    out, mask = reg.warp_affine(texture, t)
    assert np.array_equal(out[10:100, 10:100], texture[7:97, 5:95])
    assert not mask[0, 0]  # source would be off-image
    assert mask[50, 50]


def test_warp_roundtrip_interior_rmse():
    # double bilinear resampling only stays below 1% on a smooth image
    rng = np.random.default_rng(4)
    smooth = ndimage.gaussian_filter(rng.uniform(0, 1, (192, 192)), 3.0)
    smooth = (smooth - smooth.min()) / (smooth.max() - smooth.min())
    t = random_moderate_affine(rng)
    fwd, _ = reg.warp_affine(smooth, t)
    back, mask = reg.warp_affine(fwd, t.inverse())
    inner = np.zeros_like(mask)
    inner[30:-30, 30:-30] = True
    sel = mask & inner
    rmse = np.sqrt(np.mean((back[sel] - smooth[sel]) ** 2))
    assert rmse < 0.01


def test_warp_multichannel_and_mask():
    img = np.random.default_rng(5).uniform(0, 1, (3, 40, 40))
    t = AffineTransform(np.array([[1.0, 0.0, 20.0], [0.0, 1.0, 0.0]]))
    out, mask = reg.warp_affine(img, t)
    assert out.shape == (3, 40, 40)
    assert np.all(out[:, :, :19] == 0)
    assert not mask[:, :19].any()


def test_warp_rejects_singular():
    with pytest.raises(reg.DegenerateGeometryError):
        reg.warp_affine(np.zeros((32, 32)),
                        AffineTransform(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])))


# ---------------------------------------------------------------------------
# end-to-end

def test_planted_affine_recovery(texture):
    corners = np.array([[0.0, 0.0], [191.0, 0.0], [0.0, 191.0], [191.0, 191.0]])
    for trial in range(10):
        rng = np.random.default_rng(100 + trial)
        t = random_moderate_affine(rng)
        warped, _ = reg.warp_affine(texture, t)
        est, diag = reg.register_pair(warped, texture, seed=trial)
        err = np.linalg.norm(est.apply(corners) - t.apply(corners), axis=1).mean()
        assert err <= 0.5, f"trial {trial}: corner error {err:.3f}"


def test_registration_translation_equivariant(texture):
    rng = np.random.default_rng(6)
    t = random_moderate_affine(rng)
    warped, _ = reg.warp_affine(texture, t)
    base, _ = reg.register_pair(warped, texture, seed=0)
    shift = (8, 12)
    fx = np.roll(warped, shift, axis=(0, 1))
    mv = np.roll(texture, shift, axis=(0, 1))
    again, _ = reg.register_pair(fx, mv, seed=0)
    # relative transform in the shifted frame: S t S^-1 with S the shift
    s = AffineTransform(np.array([[1.0, 0.0, shift[1]], [0.0, 1.0, shift[0]]]))
    expected = compose(s, compose(base, s.inverse()))
    corners = np.array([[20.0, 20.0], [170.0, 20.0], [20.0, 170.0], [170.0, 170.0]])
    err = np.linalg.norm(again.apply(corners) - expected.apply(corners), axis=1).mean()
    assert err < 0.5


def compose(a, b):
    """a after b."""
    lin = a.linear @ b.linear
    t = a.linear @ b.translation + a.translation
    return AffineTransform(np.hstack([lin, t[:, None]]))
