"""Reconstruction and segmentation metrics plus the constrained least-squares unmixing oracle."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WINDOW = 8


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class ReconReport:
    avg_psnr: float
    per_channel_psnr: list
    avg_ssim: float
    per_channel_ssim: list
    mean_sam: float

    @property
    def max_channel_psnr(self) -> float:
        return max(self.per_channel_psnr)

    @property
    def max_channel_ssim(self) -> float:
        return max(self.per_channel_ssim)

    def to_json(self) -> dict:
        d = asdict(self)
        d["max_channel_psnr"] = self.max_channel_psnr
        d["max_channel_ssim"] = self.max_channel_ssim
        return d


@dataclass
class SegReport:
    per_class: dict
    macro: dict

    def to_json(self) -> dict:
        return {"per_class": {str(k): v for k, v in self.per_class.items()}, "macro": self.macro}


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


# -- PSNR / SSIM / SAM ------------------------------------------------------------

def psnr(ref: np.ndarray, rec: np.ndarray, data_range: float = 1.0) -> tuple[float, np.ndarray]:
    """Per-channel PSNR of H x W x C cubes and its channel mean; exact matches read as 99 dB."""
    ref, rec = np.asarray(ref, float), np.asarray(rec, float)
    _check_same(ref, rec)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = ((ref - rec) ** 2).reshape(-1, ref.shape[-1]).mean(axis=0)
    with np.errstate(divide="ignore"):
        per = np.where(mse > 0, 10.0 * np.log10(data_range ** 2 / np.where(mse > 0, mse, 1.0)), PSNR_CAP)
    per = np.minimum(per, PSNR_CAP)
    return float(per.mean()), per


def ssim(ref: np.ndarray, rec: np.ndarray, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Single-scale SSIM with a uniform window, stride 1, population statistics."""
    x, y = np.asarray(ref, float), np.asarray(rec, float)
    _check_same(x, y)
    if x.ndim != 2 or min(x.shape) < window:
        raise ValueError(f"SSIM needs a 2-D image at least {window}x{window}, got {x.shape}")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mx, my = wx.mean(axis=(-2, -1)), wy.mean(axis=(-2, -1))
    vx = (wx ** 2).mean(axis=(-2, -1)) - mx ** 2
    vy = (wy ** 2).mean(axis=(-2, -1)) - my ** 2
    cxy = (wx * wy).mean(axis=(-2, -1)) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(s.mean())


def ssim_channels(ref: np.ndarray, rec: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    return np.array([ssim(ref[..., c], rec[..., c], data_range) for c in range(ref.shape[-1])])


def spectral_angles(ref: np.ndarray, rec: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    ref, rec = np.asarray(ref, float), np.asarray(rec, float)
    _check_same(ref, rec)
    dot = np.sum(ref * rec, axis=-1)
    cos = dot / np.maximum(np.linalg.norm(ref, axis=-1) * np.linalg.norm(rec, axis=-1), eps)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def sam_metric(ref: np.ndarray, rec: np.ndarray, eps: float = 1e-8) -> float:
    """Mean per-pixel spectral angle in radians."""
    return float(spectral_angles(ref, rec, eps).mean())


def recon_report(refs, recs, data_range: float = 1.0) -> ReconReport:
    """Aggregate over a set of cubes: per-channel values are test-set means, then max over channels."""
    psnrs, ssims, sams = [], [], []
    for ref, rec in zip(refs, recs):
        psnrs.append(psnr(ref, rec, data_range)[1])
        ssims.append(ssim_channels(ref, rec, data_range))
        sams.append(sam_metric(ref, rec))
    pc_psnr = np.mean(psnrs, axis=0)
    pc_ssim = np.mean(ssims, axis=0)
    return ReconReport(float(pc_psnr.mean()), pc_psnr.tolist(), float(pc_ssim.mean()), pc_ssim.tolist(),
                       float(np.mean(sams)))


# -- simplex-constrained least squares ------------------------------------------------

def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each last-axis vector onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(-1, v.shape[-1])
    n = flat.shape[1]
    u = -np.sort(-flat, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, n + 1)
    rho = np.count_nonzero(u - css / k > 0, axis=1)
    theta = css[np.arange(len(flat)), rho - 1] / rho
    return np.maximum(flat - theta[:, None], 0.0).reshape(v.shape)


def lipschitz(A: np.ndarray, iters: int = 50) -> float:
    """Largest eigenvalue of A^T A by power iteration."""
    G = A.T @ A
    x = np.ones(G.shape[0]) / np.sqrt(G.shape[0])
    lam = 0.0
    for _ in range(iters):
        y = G @ x
        nrm = np.linalg.norm(y)
        if nrm == 0:
            return 0.0
        x = y / nrm
        lam = float(x @ G @ x)
    return lam


@dataclass
class FCLSResult:
    abundances: np.ndarray
    residual: np.ndarray   # ||r - A x||^2 per spectrum
    iterations: int
    converged: bool


def fcls_oracle(r: np.ndarray, A: np.ndarray, iters: int = 5000, step: float | None = None,
                tol: float = 1e-14) -> FCLSResult:
    """Minimise ||r - A x||^2 over the simplex by projected gradient descent.

    ``r`` may be one spectrum (C,) or a stack (N, C). The step defaults to
    1/L with L the top eigenvalue of A^T A (slightly inflated so the power
    estimate never undershoots). Stops once no spectrum's objective moved more
    than ``tol`` in an iteration.
    """
    r = np.asarray(r, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    single = r.ndim == 1
    R = r[None] if single else r
    M = A.shape[1]
    if step is None:
        L = lipschitz(A) * 1.01
        step = 1.0 / L if L > 0 else 1.0
    G, b = A.T @ A, R @ A
    x = np.full((len(R), M), 1.0 / M)

    def objective(x):
        res = R - x @ A.T
        return np.sum(res * res, axis=1)

    f = objective(x)
    converged = False
    it = 0
    for it in range(1, iters + 1):
        grad = x @ G - b
        x = project_simplex(x - step * grad)
        f_new = objective(x)
        if np.max(np.abs(f - f_new)) <= tol:
            f = f_new
            converged = True
            break
        f = f_new
    if not converged:
        warnings.warn(f"fcls_oracle: not converged after {iters} iterations; "
                      f"max residual {float(f.max()):.3e}", ConvergenceWarning)
    return FCLSResult(x[0] if single else x, f[0] if single else f, it, converged)


def simplex_grid(M: int, resolution: float = 0.01) -> np.ndarray:
    """Every point of the simplex whose coordinates are multiples of ``resolution``."""
    n = int(round(1.0 / resolution))
    pts = [c for c in itertools.product(range(n + 1), repeat=M - 1) if sum(c) <= n]
    pts = np.array(pts, dtype=np.int64)
    last = n - pts.sum(axis=1, keepdims=True)
    return np.hstack([pts, last]) / n


# -- endmember alignment -------------------------------------------------------------

def sam_matrix(A_learned: np.ndarray, A_true: np.ndarray) -> np.ndarray:
    """Angle between learned column i and true column j."""
    a = A_learned / np.linalg.norm(A_learned, axis=0, keepdims=True)
    b = A_true / np.linalg.norm(A_true, axis=0, keepdims=True)
    return np.arccos(np.clip(a.T @ b, -1.0, 1.0))


def align_endmembers(A_learned: np.ndarray, A_true: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Exhaustive column matching minimising mean spectral angle.

    Returns ``perm`` with learned column ``perm[j]`` matched to true column ``j``,
    and the mean angle of that matching.
    """
    A_learned, A_true = np.asarray(A_learned, float), np.asarray(A_true, float)
    _check_same(A_learned, A_true)
    M = A_true.shape[1]
    if M > 10:
        raise ValueError(f"align_endmembers: M={M} > 10, exhaustive search refused")
    cost = sam_matrix(A_learned, A_true)
    best, best_perm = math.inf, None
    cols = np.arange(M)
    perms = itertools.permutations(range(M))
    while True:
        chunk = np.array(list(itertools.islice(perms, 50000)))
        if chunk.size == 0:
            break
        scores = cost[chunk, cols].mean(axis=1)
        i = int(np.argmin(scores))
        if scores[i] < best:
            best, best_perm = float(scores[i]), tuple(int(c) for c in chunk[i])
    return best_perm, best


# -- segmentation ------------------------------------------------------------------

def segmentation_report(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> SegReport:
    """Per-class accuracy (recall) and IoU in percent; absent classes drop out of the macro means."""
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    for name, a in (("pred", pred), ("truth", truth)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} labels outside [0, {num_classes})")
    per_class, accs, ious = {}, [], []
    for c in range(num_classes):
        t, p = truth == c, pred == c
        union = int(np.sum(t | p))
        if union == 0:
            continue
        entry = {"iou": 100.0 * np.sum(t & p) / union}
        ious.append(entry["iou"])
        if t.any():
            entry["top1"] = 100.0 * np.sum(t & p) / np.sum(t)
            accs.append(entry["top1"])
        per_class[c] = entry
    overall = 100.0 * float(np.mean(pred == truth)) if pred.size else 0.0
    macro = {"top1": float(np.mean(accs)) if accs else 0.0, "miou": float(np.mean(ious)) if ious else 0.0,
             "overall_top1": overall}
    return SegReport(per_class, macro)
