"""Huber, spectral-angle and mixing-consistency losses and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .ndtensor import DimensionError, Tensor


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1
    delta: float = 1.0
    epsilon: float = 1e-8
    pixel_scope: str = "masked"   # "masked" | "all"  (Huber and SAM)
    phys_scope: str = "all"       # "masked" | "visible" | "all"  (physics term)
    elementwise_huber: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.pixel_scope not in ("masked", "all"):
            raise ValueError("pixel_scope must be 'masked' or 'all'")
        if self.phys_scope not in ("masked", "visible", "all"):
            raise ValueError("phys_scope must be 'masked', 'visible' or 'all'")


@dataclass
class LossReport:
    total: Tensor
    huber: float
    sam: float
    phys: float
    weighted: dict

    def as_dict(self) -> dict:
        return {"total": self.total.item(), "huber": self.huber, "sam": self.sam, "phys": self.phys,
                "weighted": dict(self.weighted)}


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: prediction {a.shape} vs target {b.shape}")


def huber_loss(pred, target, delta: float = 1.0, elementwise: bool = False) -> Tensor:
    """Mean over rows of the Huber penalty applied to each row's residual norm.

    ``elementwise=True`` applies the penalty per scalar instead (ablation variant).
    """
    pred, target = nt.as_tensor(pred), nt.as_tensor(target)
    _same_shape(pred, target, "huber_loss")
    diff = pred - target
    rho = nt.tabs(diff) if elementwise else nt.l2norm(diff, axis=-1)
    # 0.5*min(rho, d)^2 + d*(rho - min(rho, d)) is the two-branch form without a select
    small = nt.clamp(rho, hi=delta)
    per_row = 0.5 * nt.square(small) + delta * (rho - small)
    return nt.mean(per_row)


def cosine(pred, target, eps: float = 1e-8) -> Tensor:
    pred, target = nt.as_tensor(pred), nt.as_tensor(target)
    # a floor rather than an additive eps keeps the angle exactly scale invariant
    denom = nt.clamp(nt.l2norm(pred, axis=-1) * nt.l2norm(target, axis=-1), lo=eps)
    return nt.dot(pred, target, axis=-1) / denom


def sam_loss(pred, target, eps: float = 1e-8) -> Tensor:
    """Mean spectral angle (radians) between corresponding last-axis vectors."""
    pred, target = nt.as_tensor(pred), nt.as_tensor(target)
    _same_shape(pred, target, "sam_loss")
    return nt.mean(nt.arccos(cosine(pred, target, eps)))


def phys_loss(spectra_target, abundances, A) -> Tensor:
    """Mean squared distance between target spectra and ``A @ x`` per token."""
    spectra_target, abundances, A = nt.as_tensor(spectra_target), nt.as_tensor(abundances), nt.as_tensor(A)
    if A.shape[1] != abundances.shape[-1] or A.shape[0] != spectra_target.shape[-1] \
            or spectra_target.shape[:-1] != abundances.shape[:-1]:
        raise DimensionError(
            f"phys_loss: targets {spectra_target.shape}, abundances {abundances.shape}, A {A.shape}")
    recon = abundances @ nt.transpose(A)
    return phys_from_recon(spectra_target, recon)


def phys_from_recon(spectra_target, recon) -> Tensor:
    spectra_target, recon = nt.as_tensor(spectra_target), nt.as_tensor(recon)
    _same_shape(recon, spectra_target, "phys_loss")
    return nt.mean(nt.tsum(nt.square(spectra_target - recon), axis=-1))


def total_loss(fwd, tokens: np.ndarray, bands: int, w: LossWeights) -> LossReport:
    """Weighted objective for one forward pass.

    ``tokens`` are the original B x T x P*P*C patches. Huber and SAM rows are
    single-pixel spectra; the physics term compares each token's mean spectrum
    with ``A @ x`` for that token.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 2:
        tokens = tokens[None]
    B, T, K = tokens.shape
    rows = np.arange(B)[:, None]
    if w.pixel_scope == "masked":
        idx = np.stack([pl.masked for pl in fwd.plans])
        pred, tgt = fwd.pixel_recon, tokens[rows, idx]
    else:
        pred, tgt = fwd.pixel, tokens
    n_pix = K // bands
    pred_px = nt.reshape(pred, (-1, bands))
    tgt_px = Tensor(tgt.reshape(-1, bands))
    if pred.size == 0:
        huber = sam = Tensor(0.0)
    else:
        huber = huber_loss(pred_px, tgt_px, w.delta, w.elementwise_huber)
        sam = sam_loss(pred_px, tgt_px, w.epsilon)

    means = tokens.reshape(B, T, n_pix, bands).mean(axis=2)
    recon = fwd.phys_recon
    if w.phys_scope != "all":
        attr = "masked" if w.phys_scope == "masked" else "visible"
        if len(getattr(fwd.plans[0], attr)):
            idx = np.stack([getattr(pl, attr) for pl in fwd.plans])
            means, recon = means[rows, idx], recon[rows, idx]
    phys = phys_from_recon(Tensor(means), recon)

    weighted = {"huber": w.lambda1 * huber.item(), "sam": w.lambda2 * sam.item(), "phys": w.lambda3 * phys.item()}
    total = w.lambda1 * huber + w.lambda2 * sam + w.lambda3 * phys
    return LossReport(total, huber.item(), sam.item(), phys.item(), weighted)
