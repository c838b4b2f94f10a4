"""Optimisation loop: AdamW with warmup + cosine decay, checkpointing and the two training phases."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndtensor as nt
from .checkpoint import read_checkpoint, write_checkpoint
from .metrics import recon_report, segmentation_report
from .model import (ModelConfig, ParamStore, encode_full, forward, full_plan, init_head_params, init_params,
                    make_mask, no_decay_names, patchify, unpatchify, downstream_head)
from .ndtensor import NumericError, Tensor
from .objective import LossWeights, phys_from_recon, total_loss
from .rng import stream

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step
        self.reason = reason


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 8
    warmup_epochs: float | None = None  # None -> 5% of all steps
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0           # epochs; 0 writes only the final checkpoint
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    validation: list = field(default_factory=list)

    def append(self, record: dict, sink=None) -> None:
        self.records.append(record)
        if sink is not None:
            sink.write(json.dumps(record, sort_keys=True) + "\n")
            sink.flush()


# -- optimiser ----------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup to ``base_lr`` then half-cosine decay to zero at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: ParamStore, grads: dict | None, state: AdamWState, lr: float,
               betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.0,
               no_decay=frozenset()) -> None:
    """In-place bias-corrected Adam update with decoupled weight decay."""
    b1, b2 = betas
    if grads is None:
        grads = {k: t.grad for k, t in params.trainable()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter '{name}'")
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.trainable():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and name not in no_decay:
            t.data = t.data - lr * weight_decay * t.data
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return total


# -- checkpoints ---------------------------------------------------------------------

def save_training_state(path, params: ParamStore, opt: AdamWState, cfg: ModelConfig) -> None:
    tensors = params.state()
    for k in params.names():
        if k in opt.m:
            tensors[f"opt.m.{k}"] = opt.m[k]
            tensors[f"opt.v.{k}"] = opt.v[k]
    write_checkpoint(path, tensors, opt.step)
    Path(str(path) + ".json").write_text(json.dumps({"model": asdict(cfg)}, indent=2, sort_keys=True) + "\n")


def load_training_state(path, cfg: ModelConfig | None = None) -> tuple[ParamStore, AdamWState, ModelConfig]:
    tensors, step = read_checkpoint(path)
    if cfg is None:
        side = json.loads(Path(str(path) + ".json").read_text())
        cfg = ModelConfig(**side["model"])
    params = init_params(cfg)
    params.load_state({k: v for k, v in tensors.items() if not k.startswith("opt.")})
    opt = AdamWState(step=step)
    for k, v in tensors.items():
        if k.startswith("opt.m."):
            opt.m[k[6:]] = v.copy()
        elif k.startswith("opt.v."):
            opt.v[k[6:]] = v.copy()
    return params, opt, cfg


# -- pretraining ----------------------------------------------------------------------

def _warmup_steps(cfg: TrainConfig, steps_per_epoch: int, total: int) -> int:
    if cfg.warmup_epochs is None:
        return int(round(0.05 * total))
    return int(round(cfg.warmup_epochs * steps_per_epoch))


def pretrain(cfg: TrainConfig, cubes: np.ndarray, *, out_dir=None, resume=None, stop_at: int | None = None,
             params: ParamStore | None = None, log_sink=None) -> tuple[ParamStore, TrainLog]:
    """Masked-reconstruction pretraining on an N x H x W x C array.

    ``resume`` is a checkpoint path; ``stop_at`` ends the run after that many
    optimiser steps (used to test resumption). Checkpoints go to ``out_dir``.
    """
    mcfg = cfg.model
    cubes = np.asarray(cubes, dtype=np.float64)
    N = len(cubes)
    if cubes.shape[1:] != (mcfg.image_size, mcfg.image_size, mcfg.bands):
        raise ValueError(f"cubes {cubes.shape[1:]} do not match model input "
                         f"{(mcfg.image_size, mcfg.image_size, mcfg.bands)}")
    tokens = patchify(cubes, mcfg.patch_size)
    T = mcfg.num_tokens
    spe = math.ceil(N / cfg.batch_size)
    total = cfg.epochs * spe
    warm = _warmup_steps(cfg, spe, total)
    if resume is not None:
        params, opt, _ = load_training_state(resume, mcfg)
    else:
        if params is None:
            params = init_params(mcfg, cfg.seed, cubes.reshape(-1, mcfg.bands).mean(axis=0))
        opt = AdamWState()
    no_decay = no_decay_names(params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trainlog = TrainLog()
    end = total if stop_at is None else min(total, stop_at)

    for step in range(opt.step, end):
        epoch, b = divmod(step, spe)
        order = stream(cfg.seed, "order", epoch).permutation(N)
        idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        plans = [make_mask(T, mcfg.mask_ratio, cfg.seed, epoch * N + int(i)) for i in idx]
        params.zero_grad()
        lr = cosine_lr(step, total, cfg.base_lr, warm)
        # overflow is detected explicitly below, so numpy's warnings add nothing
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                fwd = forward(tokens[idx], plans, params, mcfg)
                rep = total_loss(fwd, tokens[idx], mcfg.bands, cfg.loss)
            except NumericError as exc:
                _abort(trainlog, log_sink, step, f"forward pass: {exc}")
            record = {"step": step, "epoch": epoch, "lr": lr, "total": rep.total.item(), "huber": rep.huber,
                      "sam": rep.sam, "phys": rep.phys, "weighted": rep.weighted}
            if not np.isfinite(record["total"]):
                _abort(trainlog, log_sink, step, "non-finite loss")
            rep.total.backward()
        grads = {k: t.grad for k, t in params.trainable()}
        bad = [k for k, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
        if bad:
            _abort(trainlog, log_sink, step, f"non-finite gradient in '{bad[0]}'")
        record["grad_norm"] = clip_grad_norm(grads, cfg.grad_clip)
        adamw_step(params, grads, opt, lr, cfg.betas, cfg.eps, cfg.weight_decay, no_decay)
        bad = [k for k, t in params.trainable() if not np.all(np.isfinite(t.data))]
        if bad:
            _abort(trainlog, log_sink, step, f"non-finite parameter '{bad[0]}'")
        trainlog.append(record, log_sink)
        last_in_epoch = b == spe - 1
        if out is not None and last_in_epoch and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_training_state(out / f"ckpt_step{opt.step:07d}.kckp", params, opt, mcfg)
        if last_in_epoch:
            log.info("epoch %d step %d loss %.6f", epoch, step, record["total"])

    if out is not None:
        save_training_state(out / "final.kckp", params, opt, mcfg)
    return params, trainlog


def _abort(trainlog: TrainLog, sink, step: int, reason: str):
    trainlog.append({"event": "abort", "step": step, "reason": reason}, sink)
    raise TrainingAborted(step, reason)


def epoch_losses(trainlog: TrainLog) -> list[float]:
    """Mean logged total loss per epoch."""
    by_epoch: dict[int, list] = {}
    for r in trainlog.records:
        if "epoch" in r:
            by_epoch.setdefault(r["epoch"], []).append(r["total"])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


# -- evaluation ----------------------------------------------------------------------------

def reconstruct(params: ParamStore, cfg: ModelConfig, cubes: np.ndarray, mask_ratio: float | None = None,
                seed: int = 0, batch_size: int = 16):
    """Masked reconstruction: predicted patches pasted into the visible context.

    Returns (reconstructed cubes, forward abundances B x T x M, physics loss on all tokens).
    """
    cubes = np.asarray(cubes, dtype=np.float64)
    ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
    tokens = patchify(cubes, cfg.patch_size)
    N, T, _ = tokens.shape
    recs, abunds, phys = [], [], []
    with nt.no_grad():
        for s in range(0, N, batch_size):
            tk = tokens[s:s + batch_size]
            plans = [make_mask(T, ratio, seed, s + i, purpose="eval-mask") if ratio > 0 else full_plan(T)
                     for i in range(len(tk))]
            fwd = forward(tk, plans, params, cfg)
            out = tk.copy()
            rows = np.arange(len(tk))[:, None]
            if len(plans[0].masked):
                masked = np.stack([pl.masked for pl in plans])
                out[rows, masked] = fwd.pixel_recon.data
            recs.append(out)
            abunds.append(fwd.abundances.data)
            means = tk.reshape(len(tk), T, -1, cfg.bands).mean(axis=2)
            phys.append(phys_from_recon(Tensor(means), fwd.phys_recon).item() * len(tk))
    rec = unpatchify(np.concatenate(recs), cfg.image_size, cfg.image_size, cfg.bands, cfg.patch_size)
    return rec, np.concatenate(abunds), float(np.sum(phys) / N)


def evaluate(params: ParamStore, cfg: ModelConfig, cubes: np.ndarray, data_range: float = 1.0,
             mask_ratio: float | None = None, seed: int = 0):
    rec, _, phys = reconstruct(params, cfg, cubes, mask_ratio, seed)
    rec = np.clip(rec, 0.0, data_range)
    return recon_report(list(cubes), list(rec), data_range), phys


# -- downstream ------------------------------------------------------------------------------

@dataclass
class DownstreamConfig:
    epochs: int = 200
    lr: float = 5e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    seed: int = 0
    test_fraction: float = 0.25


def patch_labels(labels: np.ndarray, P: int) -> np.ndarray:
    """Majority pixel label per patch (ties to the lowest class); (..., H, W) -> (..., T)."""
    labels = np.asarray(labels, dtype=np.int64)
    H, W = labels.shape[-2:]
    if H % P or W % P:
        raise ValueError(f"label grid {H}x{W} not aligned to patch size {P}")
    lead = labels.shape[:-2]
    flat = patchify(labels.reshape(*lead, H, W, 1), P)  # (..., T, P*P)
    K = int(labels.max()) + 1
    counts = np.stack([(flat == k).sum(axis=-1) for k in range(K)], axis=-1)
    return np.argmax(counts, axis=-1)


def train_downstream(params: ParamStore, cfg: ModelConfig, cubes: np.ndarray, labels: np.ndarray,
                     num_classes: int, dcfg: DownstreamConfig | None = None):
    """Train a conv+linear head on frozen encoder features; evaluate on held-out tiles.

    ``labels`` are per-pixel class maps (N x H x W). Returns (head, SegReport, info).
    """
    dcfg = dcfg or DownstreamConfig()
    cubes = np.asarray(cubes, dtype=np.float64)
    plabels = patch_labels(labels, cfg.patch_size)
    before = params.checksum()
    feats = encode_full(patchify(cubes, cfg.patch_size), params, cfg)
    N = len(cubes)
    n_test = max(1, int(round(dcfg.test_fraction * N)))
    split = stream(dcfg.seed, "split").permutation(N)
    test, train = split[:n_test], split[n_test:]
    # per-dimension standardisation from the training tiles (a non-affine batch norm, as in linear probing)
    mu = feats[train].mean(axis=(0, 1))
    sd = feats[train].std(axis=(0, 1)) + 1e-6
    feats = (feats - mu) / sd
    head = init_head_params(cfg.embed_dim, num_classes, dcfg.seed)
    opt = AdamWState()
    onehot = np.eye(num_classes)[plabels]
    spe = math.ceil(len(train) / dcfg.batch_size)
    total = dcfg.epochs * spe
    for step in range(total):
        epoch, b = divmod(step, spe)
        order = train[stream(dcfg.seed, "head-order", epoch).permutation(len(train))]
        idx = order[b * dcfg.batch_size:(b + 1) * dcfg.batch_size]
        head.zero_grad()
        logp = nt.log_softmax(downstream_head(feats[idx], head, cfg.grid), axis=-1)
        loss = -nt.mean(nt.tsum(logp * onehot[idx], axis=-1))
        loss.backward()
        adamw_step(head, None, opt, cosine_lr(step, total, dcfg.lr, 0), weight_decay=dcfg.weight_decay)
    with nt.no_grad():
        pred = np.argmax(downstream_head(feats[test], head, cfg.grid).data, axis=-1)
    report = segmentation_report(pred, plabels[test], num_classes)
    majority = int(np.argmax(np.bincount(plabels[train].ravel(), minlength=num_classes)))
    info = {
        "majority_class": majority,
        "majority_top1": 100.0 * float(np.mean(plabels[test] == majority)),
        "encoder_checksum_before": before,
        "encoder_checksum_after": params.checksum(),
        "train_tiles": train.tolist(),
        "test_tiles": test.tolist(),
    }
    return head, report, info
