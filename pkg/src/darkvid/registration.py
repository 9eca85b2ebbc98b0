"""NIR-to-RGB alignment: corner features, robust affine estimation, warping.

The rig this models is parallax-free, so a single affine per session is
enough. Points are (x, y) with x the column index; pixel centers sit on
integer coordinates. An AffineTransform maps moving-image coordinates to
fixed-image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class RegistrationError(ValueError):
    pass


class FeatureError(RegistrationError):
    """Too few or degenerate features; caller should fall back to a manual
    or identity transform."""


class DegenerateGeometryError(RegistrationError):
    pass


@dataclass
class AffineTransform:
    """2x3 matrix (a, b, tx; c, d, ty) in pixel units."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (2, 3):
            raise RegistrationError(f"affine matrix must be 2x3, got {self.matrix.shape}")

    @classmethod
    def identity(cls):
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @property
    def linear(self):
        return self.matrix[:, :2]

    @property
    def translation(self):
        return self.matrix[:, 2]

    def is_invertible(self, eps=1e-12):
        return abs(np.linalg.det(self.linear)) > eps

    def apply(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.linear.T + self.translation

    def inverse(self):
        if not self.is_invertible():
            raise DegenerateGeometryError("affine transform is singular")
        inv = np.linalg.inv(self.linear)
        t = -inv @ self.translation
        return AffineTransform(np.hstack([inv, t[:, None]]))

    def to_text(self):
        rows = [" ".join(f"{v:.9f}" for v in row) for row in self.matrix]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text):
        vals = [float(v) for v in text.split()]
        if len(vals) != 6:
            raise RegistrationError(f"transform file must hold 6 numbers, got {len(vals)}")
        return cls(np.array(vals).reshape(2, 3))


# ---------------------------------------------------------------------------
# feature detection + description

HARRIS_K = 0.05
DESCRIPTOR_PATCH = 16  # 4x4 cells of 4px, 8 orientation bins


def detect_and_describe(img, max_keypoints=400, response_rel=0.005):
    """Harris corners with subpixel refinement plus gradient-histogram
    descriptors. Returns (keypoints (N,2) xy, descriptors (N,128)).

    Raises FeatureError when fewer than 8 features survive.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise RegistrationError(f"detector expects a grayscale plane, got {img.shape}")
    h, w = img.shape
    if h < 32 or w < 32:
        raise RegistrationError(f"image too small for detection: {img.shape}")

    gx = ndimage.sobel(img, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(img, axis=0, mode="nearest") / 8.0
    ixx = ndimage.gaussian_filter(gx * gx, 1.5, mode="nearest")
    iyy = ndimage.gaussian_filter(gy * gy, 1.5, mode="nearest")
    ixy = ndimage.gaussian_filter(gx * gy, 1.5, mode="nearest")
    resp = ixx * iyy - ixy * ixy - HARRIS_K * (ixx + iyy) ** 2

    margin = DESCRIPTOR_PATCH // 2 + 2
    local_max = resp == ndimage.maximum_filter(resp, size=5, mode="nearest")
    strong = resp > max(response_rel * resp.max(), 1e-10)
    mask = local_max & strong
    mask[:margin] = mask[-margin:] = False
    mask[:, :margin] = mask[:, -margin:] = False
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise FeatureError(
            "no corner features found; fall back to a manual or identity transform")
    order = np.argsort(resp[ys, xs])[::-1][:max_keypoints]
    ys, xs = ys[order], xs[order]

    kps = []
    descs = []
    for y, x in zip(ys, xs):
        dx, dy = _subpixel_offset(resp, y, x)
        kps.append((x + dx, y + dy))
        descs.append(_describe_patch(gx, gy, y, x))
    kps = np.array(kps)
    descs = np.array(descs)
    if len(kps) < 8:
        raise FeatureError(
            f"only {len(kps)} features found (< 8); fall back to a manual "
            "or identity transform")
    return kps, descs


def _subpixel_offset(resp, y, x):
    # quadratic fit on the 3x3 response neighbourhood
    gx = (resp[y, x + 1] - resp[y, x - 1]) / 2.0
    gy = (resp[y + 1, x] - resp[y - 1, x]) / 2.0
    hxx = resp[y, x + 1] - 2 * resp[y, x] + resp[y, x - 1]
    hyy = resp[y + 1, x] - 2 * resp[y, x] + resp[y - 1, x]
    hxy = (resp[y + 1, x + 1] - resp[y + 1, x - 1]
           - resp[y - 1, x + 1] + resp[y - 1, x - 1]) / 4.0
    det = hxx * hyy - hxy * hxy
    if abs(det) < 1e-18:
        return 0.0, 0.0
    dx = -(hyy * gx - hxy * gy) / det
    dy = -(hxx * gy - hxy * gx) / det
    if abs(dx) > 0.5 or abs(dy) > 0.5:
        return 0.0, 0.0
    return dx, dy


_DESC_WEIGHT = None


def _describe_patch(gx, gy, y, x):
    """4x4 cells x 8 orientation bins over a 16x16 gradient patch."""
    global _DESC_WEIGHT
    p = DESCRIPTOR_PATCH
    half = p // 2
    px = gx[y - half:y + half, x - half:x + half]
    py = gy[y - half:y + half, x - half:x + half]
    mag = np.hypot(px, py)
    if _DESC_WEIGHT is None or _DESC_WEIGHT.shape != (p, p):
        c = np.arange(p) - (p - 1) / 2.0
        _DESC_WEIGHT = np.exp(-(c[:, None] ** 2 + c[None, :] ** 2) / (2 * (p / 2.0) ** 2))
    wmag = mag * _DESC_WEIGHT
    ang = np.arctan2(py, px)  # [-pi, pi]
    obin = ((ang + np.pi) / (2 * np.pi) * 8).astype(np.int64) % 8
    cell_y = (np.arange(p) // (p // 4))[:, None] + np.zeros((1, p), dtype=np.int64)
    cell_x = (np.arange(p) // (p // 4))[None, :] + np.zeros((p, 1), dtype=np.int64)
    idx = (cell_y * 4 + cell_x) * 8 + obin
    hist = np.bincount(idx.ravel(), weights=wmag.ravel(), minlength=128)
    norm = np.linalg.norm(hist)
    if norm > 0:
        hist = np.minimum(hist / norm, 0.2)
        norm = np.linalg.norm(hist)
        if norm > 0:
            hist = hist / norm
    return hist


def match_descriptors(desc_a, desc_b, ratio=0.9):
    """Mutual nearest neighbours passing Lowe's ratio test.

    Returns index pairs (i, j) into the two keypoint lists.
    """
    d2 = (np.sum(desc_a ** 2, axis=1)[:, None]
          + np.sum(desc_b ** 2, axis=1)[None, :]
          - 2.0 * desc_a @ desc_b.T)
    np.maximum(d2, 0.0, out=d2)
    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    pairs = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i:
            continue
        row = d2[i]
        best = row[j]
        row_wo = np.delete(row, j)
        second = row_wo.min() if row_wo.size else np.inf
        if best <= (ratio ** 2) * second:
            pairs.append((i, j))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# robust affine estimation

def _fit_affine_ls(src, dst):
    n = len(src)
    a = np.zeros((2 * n, 6))
    b = np.zeros(2 * n)
    a[0::2, 0] = src[:, 0]
    a[0::2, 1] = src[:, 1]
    a[0::2, 2] = 1.0
    a[1::2, 3] = src[:, 0]
    a[1::2, 4] = src[:, 1]
    a[1::2, 5] = 1.0
    b[0::2] = dst[:, 0]
    b[1::2] = dst[:, 1]
    params, *_ = np.linalg.lstsq(a, b, rcond=None)
    return AffineTransform(params.reshape(2, 3))


def _collinear(pts, eps=1e-6):
    area = abs((pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
               - (pts[2, 0] - pts[0, 0]) * (pts[1, 1] - pts[0, 1]))
    return area < eps


def estimate_affine(src, dst, iters=500, inlier_tol_px=2.0, seed=0):
    """RANSAC over 3-point minimal samples, least-squares refit on inliers.

    src, dst: (N,2) matched points (moving, fixed). Returns
    (AffineTransform, inlier mask, rms residual over inliers).
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise RegistrationError(f"matches disagree: {src.shape} vs {dst.shape}")
    n = len(src)
    if n < 3:
        raise DegenerateGeometryError(f"need >= 3 point pairs, got {n}")
    if all(_collinear(src[list(c)]) for c in _triples(n)):
        raise DegenerateGeometryError("all source points are collinear")

    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = -1
    best_err = np.inf
    for _ in range(iters):
        idx = rng.choice(n, size=3, replace=False)
        tri = src[idx]
        if _collinear(tri):
            continue
        try:
            t = _fit_affine_ls(tri, dst[idx])
        except np.linalg.LinAlgError:
            continue
        resid = np.linalg.norm(t.apply(src) - dst, axis=1)
        mask = resid < inlier_tol_px
        count = int(mask.sum())
        err = float(resid[mask].sum()) if count else np.inf
        if count > best_count or (count == best_count and err < best_err):
            best_count, best_mask, best_err = count, mask, err
    if best_mask is None or best_count < 3:
        raise DegenerateGeometryError("RANSAC found no 3-point consensus")

    # refit on inliers, then once more on the refreshed inlier set
    mask = best_mask
    for _ in range(2):
        t = _fit_affine_ls(src[mask], dst[mask])
        resid = np.linalg.norm(t.apply(src) - dst, axis=1)
        new_mask = resid < inlier_tol_px
        if new_mask.sum() < 3:
            break
        mask = new_mask
    rms = float(np.sqrt(np.mean(resid[mask] ** 2)))
    if not t.is_invertible():
        raise DegenerateGeometryError("estimated affine is singular")
    return t, mask, rms


def _triples(n):
    # a small deterministic sample of index triples for the collinearity pre-check
    step = max(n // 3, 1)
    yield (0, min(step, n - 1), min(2 * step, n - 1))
    yield (0, n // 2, n - 1)


# ---------------------------------------------------------------------------
# warping

def warp_affine(img, transform, out_shape=None):
    """Inverse-mapped bilinear warp. Returns (warped, valid_mask).

    Out-of-bounds samples are 0 and marked invalid. img may be (H, W) or
    (C, H, W); the mask is (H, W).
    """
    if not transform.is_invertible():
        raise DegenerateGeometryError("cannot warp by a singular transform")
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    planes = img[None] if squeeze else img
    c, h, w = planes.shape
    oh, ow = out_shape if out_shape is not None else (h, w)

    inv = transform.inverse()
    ys, xs = np.mgrid[0:oh, 0:ow]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    sp = inv.apply(pts)
    sx = sp[:, 0].reshape(oh, ow)
    sy = sp[:, 1].reshape(oh, ow)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    valid = (x0 >= 0) & (y0 >= 0) & (x0 + 1 <= w - 1) & (y0 + 1 <= h - 1)
    # exact grid hits on the far edge stay valid
    edge_x = (x0 == w - 1) & (fx == 0) & (y0 >= 0) & (y0 <= h - 1)
    edge_y = (y0 == h - 1) & (fy == 0) & (x0 >= 0) & (x0 <= w - 1)
    valid |= edge_x & (y0 + 1 <= h - 1)
    valid |= edge_y & (x0 + 1 <= w - 1)
    valid |= edge_x & edge_y

    x0c = np.clip(x0, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)

    out = np.zeros((c, oh, ow), dtype=np.float64)
    for ci in range(c):
        p = planes[ci]
        val = (p[y0c, x0c] * (1 - fx) * (1 - fy)
               + p[y0c, x1c] * fx * (1 - fy)
               + p[y1c, x0c] * (1 - fx) * fy
               + p[y1c, x1c] * fx * fy)
        out[ci] = np.where(valid, val, 0.0)
    return (out[0] if squeeze else out), valid


# ---------------------------------------------------------------------------
# end-to-end registration

def register_pair(fixed, moving, iters=500, inlier_tol_px=2.0, seed=0):
    """Estimate the affine mapping moving-image coords onto the fixed image.

    fixed/moving are grayscale planes (use the green channel for RGB).
    Returns (AffineTransform, diagnostics dict).
    """
    kp_f, d_f = detect_and_describe(fixed)
    kp_m, d_m = detect_and_describe(moving)
    pairs = match_descriptors(d_m, d_f)
    if len(pairs) < 3:
        raise FeatureError(
            f"only {len(pairs)} descriptor matches; fall back to a manual transform")
    t, mask, rms = estimate_affine(kp_m[pairs[:, 0]], kp_f[pairs[:, 1]],
                                   iters=iters, inlier_tol_px=inlier_tol_px, seed=seed)
    diag = {
        "n_fixed": len(kp_f),
        "n_moving": len(kp_m),
        "n_matches": len(pairs),
        "n_inliers": int(mask.sum()),
        "rms_px": rms,
    }
    return t, diag
