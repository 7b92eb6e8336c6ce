"""Evaluation metrics over point clouds, depth maps, and images.

Point metrics pair clouds by nearest neighbor (k-d tree for the search,
distances recomputed in numpy, ties broken toward the lowest index).
Means over point populations sum in sorted order so every metric is
invariant to enumeration order, bit for bit.

umeyama_align(pred, gt) returns the similarity that carries the
ground-truth points onto the predictions (so a synthetic transform
applied to gt is recovered as-is); apply its inverse to predictions
before computing distances in the ground-truth frame.
"""

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0
NORMAL_K = 10


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * (points @ self.rotation.T) + self.translation

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(scale=1.0 / self.scale, rotation=rt,
                                   translation=-(rt @ self.translation) / self.scale)


@dataclass
class MetricReport:
    acc_mean: float | None = None
    acc_median: float | None = None
    comp_mean: float | None = None
    comp_median: float | None = None
    nc_mean: float | None = None
    nc_median: float | None = None
    abs_rel: float | None = None
    delta_125: float | None = None
    psnr: float | None = None
    ssim: float | None = None
    psnr_dynamic: float | None = None
    ssim_dynamic: float | None = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def _ordered_mean(values: np.ndarray) -> float:
    """Mean with sorted summation: independent of input order, bit for bit."""
    return float(np.sort(values, kind="stable").sum() / values.size)


def umeyama_align(pred, gt, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity carrying gt onto pred.

    Closed form via the cross-covariance SVD with a reflection guard.
    Raises when fewer than 3 pairs are given or the configuration is
    degenerate (covariance rank below 2 leaves the rotation undetermined).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"need matching (n, 3) clouds, got {pred.shape} "
                         f"and {gt.shape}")
    n = pred.shape[0]
    if n < 3:
        raise ValueError("at least 3 correspondences are required")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    pc = pred - mu_p
    gc = gt - mu_g
    cov = pc.T @ gc / n
    if np.linalg.matrix_rank(cov, tol=1e-12) < 2:
        raise ValueError("degenerate correspondences: covariance rank < 2")
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.ones(3)
    if np.linalg.det(u @ vt) < 0:
        s_fix[2] = -1.0
    rot = u @ np.diag(s_fix) @ vt
    if with_scale:
        var_g = (gc * gc).sum() / n
        scale = float((d * s_fix).sum() / var_g)
    else:
        scale = 1.0
    trans = mu_p - scale * (rot @ mu_g)
    return SimilarityTransform(scale=scale, rotation=rot, translation=trans)


def _nearest(query: np.ndarray, refs: np.ndarray):
    """Nearest reference per query point: (distances, indices).

    Distances are recomputed in numpy from the matched pairs; exact ties
    resolve to the lowest reference index.
    """
    nref = refs.shape[0]
    if nref == 1:
        idx = np.zeros(query.shape[0], dtype=np.int64)
        return np.linalg.norm(query - refs[0], axis=1), idx
    tree = cKDTree(refs)
    _, pair = tree.query(query, k=2)
    d0 = np.linalg.norm(query - refs[pair[:, 0]], axis=1)
    d1 = np.linalg.norm(query - refs[pair[:, 1]], axis=1)
    idx = np.where(d1 < d0, pair[:, 1], pair[:, 0])
    dist = np.minimum(d0, d1)
    tie = d0 == d1
    idx[tie] = np.minimum(pair[tie, 0], pair[tie, 1])
    return dist, idx


def accuracy_completeness(pred, gt):
    """(acc_mean, acc_median, comp_mean, comp_median) between clouds.

    Accuracy measures predicted points against their nearest ground
    truth; completeness swaps the roles, so acc(a, b) == comp(b, a).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("both clouds must be nonempty")
    d_acc, _ = _nearest(pred, gt)
    d_comp, _ = _nearest(gt, pred)
    return (_ordered_mean(d_acc), float(np.median(d_acc)),
            _ordered_mean(d_comp), float(np.median(d_comp)))


def estimate_normals(points, k: int = NORMAL_K) -> np.ndarray:
    """Unit normals from a k-nearest-neighbor plane fit."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n < k:
        raise ValueError(f"normal estimation needs at least {k} points, got {n}")
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k)
    hoods = points[idx]                       # (n, k, 3)
    centered = hoods - hoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)             # ascending eigenvalues
    normals = vecs[:, :, 0]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(norms, 1e-300)


def normal_consistency(pred, gt, pred_normals=None, gt_normals=None):
    """(nc_mean, nc_median): |cos| between normals of matched pairs."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred_normals is None:
        pred_normals = estimate_normals(pred)
    if gt_normals is None:
        gt_normals = estimate_normals(gt)
    _, idx = _nearest(pred, gt)
    cos = np.abs((pred_normals * gt_normals[idx]).sum(axis=1))
    cos = np.minimum(cos, 1.0)
    return _ordered_mean(cos), float(np.median(cos))


def depth_metrics(pred, gt, mask, median_scale: bool = True):
    """(abs_rel, delta_125) over the mask, after optional median scaling."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool) & (gt > 0)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    p = pred[mask]
    g = gt[mask]
    if median_scale:
        med_p = np.median(p)
        if med_p <= 0:
            raise ValueError("non-positive median predicted depth")
        p = p * (np.median(g) / med_p)
    abs_rel = float(np.mean(np.abs(p - g) / g))
    ratio = np.maximum(p / g, g / np.maximum(p, 1e-300))
    delta = float(np.mean(ratio < 1.25))
    return abs_rel, delta


@lru_cache(maxsize=None)
def _ssim_kernel():
    half = SSIM_WINDOW // 2
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed(img2d):
    """Gaussian-weighted window means over all 11x11 positions."""
    win = sliding_window_view(img2d, (SSIM_WINDOW, SSIM_WINDOW))
    return (win * _ssim_kernel()).sum(axis=(-2, -1))


def image_metrics(pred, gt, mask=None):
    """(psnr, ssim) for [0, 1] images shaped (3, h, w).

    PSNR caps at 100 dB below MSE 1e-10.  SSIM uses an 11x11 Gaussian
    window (sigma 1.5) and averages window positions whose center pixel
    is inside the mask; empty masks yield (nan, nan).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError(f"need matching (c, h, w) images, got {pred.shape} "
                         f"and {gt.shape}")
    _, h, w = pred.shape
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("nan"), float("nan")

    err = (pred - gt)[:, mask]
    mse = float(np.mean(err * err))
    psnr = PSNR_CAP if mse < 1e-10 else float(10.0 * np.log10(1.0 / mse))

    half = SSIM_WINDOW // 2
    center_mask = mask[half:h - half, half:w - half]
    if not center_mask.any():
        return psnr, float("nan")
    vals = []
    for c in range(pred.shape[0]):
        mu_p = _windowed(pred[c])
        mu_g = _windowed(gt[c])
        var_p = _windowed(pred[c] * pred[c]) - mu_p * mu_p
        var_g = _windowed(gt[c] * gt[c]) - mu_g * mu_g
        cov = _windowed(pred[c] * gt[c]) - mu_p * mu_g
        num = (2.0 * mu_p * mu_g + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_p * mu_p + mu_g * mu_g + SSIM_C1) * (var_p + var_g + SSIM_C2)
        vals.append((num / den)[center_mask])
    ssim = float(np.mean(np.concatenate(vals)))
    return psnr, ssim
