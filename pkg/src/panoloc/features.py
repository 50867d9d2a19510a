"""Classical global and local feature extraction.

Deterministic stand-ins for learned extractors: a gradient-orientation
grid descriptor for retrieval and Harris corners with patch descriptors
for matching.  Both are selected by name so external extractors can be
plugged in behind the same interfaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

GLOBAL_DESC_DIM = 512
LOCAL_DESC_DIM = 128
PATCH_SIZE = 16
EPS = 1e-12


@dataclass
class LocalFeatureSet:
    keypoints: np.ndarray    # (N, 2) float64, (x, y) pixels
    scores: np.ndarray       # (N,)
    descriptors: np.ndarray  # (N, 128) float64, unit norm

    def __len__(self) -> int:
        return self.keypoints.shape[0]

    @staticmethod
    def empty() -> "LocalFeatureSet":
        return LocalFeatureSet(np.zeros((0, 2)), np.zeros(0), np.zeros((0, LOCAL_DESC_DIM)))

    def translated(self, dx: float, dy: float) -> "LocalFeatureSet":
        return LocalFeatureSet(self.keypoints + np.array([dx, dy]),
                               self.scores, self.descriptors)


@dataclass
class MatchSet:
    """Mutual matches: each side's index appears at most once."""

    pairs: np.ndarray   # (M, 2) int64 (query_idx, map_idx)
    scores: np.ndarray  # (M,) in [0, 1]

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @staticmethod
    def empty() -> "MatchSet":
        return MatchSet(np.zeros((0, 2), dtype=np.int64), np.zeros(0))


# ---------------------------------------------------------------------------
# shared image helpers

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    yy = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xx = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(yy).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xx).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(yy - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xx - x0, 0.0, 1.0)[None, :]
    return (img[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + img[np.ix_(y0, x1)] * (1 - fy) * fx
            + img[np.ix_(y1, x0)] * fy * (1 - fx)
            + img[np.ix_(y1, x1)] * fy * fx)


def _gradients(img: np.ndarray):
    img = np.asarray(img, dtype=np.float64)
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ori = np.arctan2(gy, gx)  # [-pi, pi]
    return mag, ori


def _orientation_bins(ori: np.ndarray, n_bins: int) -> np.ndarray:
    bins = np.floor((ori + np.pi) / (2 * np.pi) * n_bins).astype(np.int64)
    return np.clip(bins, 0, n_bins - 1)


# ---------------------------------------------------------------------------
# global descriptor

def extract_global(img: np.ndarray) -> np.ndarray:
    """512-d gradient-orientation grid descriptor, unit L2 norm.

    The image is resized to 128x128; 8-bin orientation histograms weighted
    by gradient magnitude are pooled over an 8x8 spatial grid.  Invariant
    to gain and bias changes of the input."""
    if img.size == 0:
        raise ValueError("empty image")
    small = bilinear_resize(img, 128, 128)
    mag, ori = _gradients(small)
    obin = _orientation_bins(ori, 8)
    cell_y = (np.arange(128) // 16)[:, None]
    cell_x = (np.arange(128) // 16)[None, :]
    idx = ((cell_y * 8 + cell_x) * 8 + obin).ravel()
    desc = np.bincount(idx, weights=mag.ravel(), minlength=GLOBAL_DESC_DIM)
    desc = np.sqrt(desc)  # soften dominant bins
    n = np.linalg.norm(desc)
    if n < EPS:
        desc = np.full(GLOBAL_DESC_DIM, 1.0 / np.sqrt(GLOBAL_DESC_DIM))
        return desc
    return desc / n


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError("descriptor length mismatch")
    return float(np.dot(a, b))


# ---------------------------------------------------------------------------
# local features

def extract_local(img: np.ndarray, max_kp: int = 1024,
                  smooth_sigma: float = 3.0) -> LocalFeatureSet:
    """Harris corners with 3x3 non-max suppression and patch descriptors.

    The image is Gaussian-smoothed first so that gradients reflect scene
    structure rather than single-pixel rendering speckle; corners then
    localize consistently across the intensity-vs-grayscale modality gap.
    Descriptors are 4x4-cell x 8-orientation-bin histograms over a 16x16
    patch, L2-normalized; gradient-based, hence gain/bias invariant."""
    if max_kp <= 0:
        raise ValueError("max_kp must be positive")
    img = np.asarray(img, dtype=np.float64)
    if smooth_sigma > 0:
        img = ndimage.gaussian_filter(img, smooth_sigma)
    h, w = img.shape
    margin = PATCH_SIZE // 2
    if h < PATCH_SIZE + 1 or w < PATCH_SIZE + 1:
        return LocalFeatureSet.empty()

    gy, gx = np.gradient(img)
    sxx = ndimage.gaussian_filter(gx * gx, 1.5)
    syy = ndimage.gaussian_filter(gy * gy, 1.5)
    sxy = ndimage.gaussian_filter(gx * gy, 1.5)
    resp = sxx * syy - sxy * sxy - 0.04 * (sxx + syy) ** 2

    local_max = resp == ndimage.maximum_filter(resp, size=3)
    thresh = max(1e-8, 1e-4 * float(resp.max(initial=0.0)))
    mask = local_max & (resp > thresh)
    mask[:margin, :] = False
    mask[-margin - 1 :, :] = False
    mask[:, :margin] = False
    mask[:, -margin - 1 :] = False
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return LocalFeatureSet.empty()
    scores = resp[ys, xs]
    order = np.lexsort((xs, ys, -scores))[:max_kp]
    ys, xs, scores = ys[order], xs[order], scores[order]

    mag, ori = _gradients(img)
    obin = _orientation_bins(ori, 8)
    off = np.arange(PATCH_SIZE) - margin
    cell = (np.arange(PATCH_SIZE) // 4)
    cell_idx = (cell[:, None] * 4 + cell[None, :]) * 8  # (16, 16)

    wy = ys[:, None, None] + off[None, :, None]
    wx = xs[:, None, None] + off[None, None, :]
    pbin = cell_idx[None, :, :] + obin[wy, wx]
    pmag = mag[wy, wx]
    desc = np.zeros((ys.size, LOCAL_DESC_DIM))
    np.add.at(desc, (np.repeat(np.arange(ys.size), PATCH_SIZE * PATCH_SIZE),
                     pbin.reshape(ys.size, -1).ravel()),
              pmag.reshape(ys.size, -1).ravel())
    desc = np.sqrt(desc)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    desc = desc / np.maximum(norms, EPS)

    kps = np.stack([xs.astype(np.float64), ys.astype(np.float64)], axis=1)
    return LocalFeatureSet(kps, scores.astype(np.float64), desc)


def match_features(a: LocalFeatureSet, b: LocalFeatureSet, ratio: float = 0.85) -> MatchSet:
    """Mutual nearest neighbors passing Lowe's ratio test on both sides.

    Distances are Euclidean on unit descriptors; score = 1 - d/2.  With a
    single candidate on a side the ratio test is bypassed there."""
    if not (0 < ratio <= 1):
        raise ValueError("ratio must be in (0, 1]")
    if len(a) == 0 or len(b) == 0:
        return MatchSet.empty()
    # squared distances via the unit-norm identity d^2 = 2 - 2 a.b
    d2 = np.maximum(2.0 - 2.0 * (a.descriptors @ b.descriptors.T), 0.0)

    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    ai = np.arange(len(a))
    mutual = nn_ba[nn_ab] == ai

    ok_a = _ratio_pass(d2, ratio)
    ok_b = _ratio_pass(d2.T, ratio)

    keep = mutual & ok_a & ok_b[nn_ab]
    qi = ai[keep]
    mi = nn_ab[keep]
    dist = np.sqrt(d2[qi, mi])
    order = np.lexsort((mi, qi))
    pairs = np.stack([qi[order], mi[order]], axis=1).astype(np.int64)
    return MatchSet(pairs, 1.0 - dist[order] / 2.0)


def _ratio_pass(d2: np.ndarray, ratio: float) -> np.ndarray:
    if d2.shape[1] < 2:
        return np.ones(d2.shape[0], dtype=bool)
    part = np.partition(d2, 1, axis=1)
    best = np.sqrt(part[:, 0])
    second = np.sqrt(part[:, 1])
    return best < ratio * np.maximum(second, EPS)


# ---------------------------------------------------------------------------
# extractor registry

GLOBAL_EXTRACTORS = {"hog-gist": extract_global}
LOCAL_EXTRACTORS = {"harris-patch": extract_local}


def get_global_extractor(name: str):
    try:
        return GLOBAL_EXTRACTORS[name]
    except KeyError:
        raise ValueError(
            f"unknown global extractor {name!r}; available: {sorted(GLOBAL_EXTRACTORS)}"
        ) from None


def get_local_extractor(name: str):
    try:
        return LOCAL_EXTRACTORS[name]
    except KeyError:
        raise ValueError(
            f"unknown local extractor {name!r}; available: {sorted(LOCAL_EXTRACTORS)}"
        ) from None
