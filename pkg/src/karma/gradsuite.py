"""Finite-difference gradient suite: every differentiable op plus the full objective on a tiny model."""
from __future__ import annotations

import contextlib

import numpy as np

from . import ndtensor as nt
from .model import ModelConfig, forward, init_params, make_mask, patchify
from .ndtensor import Tensor
from .objective import LossWeights, huber_loss, phys_loss, sam_loss, total_loss
from .rng import stream

THRESHOLD = 1e-4


def _p(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _probe(rng, fn, *inputs):
    """Scalar probe sum(fn(inputs) * w) with a fixed random weighting."""
    w = rng.uniform(-1, 1, size=fn(*inputs).shape)
    return (lambda: nt.tsum(fn(*inputs) * w)), list(inputs)


def _away_from(x: Tensor, points, margin=0.05, fill=0.3):
    for pt in points:
        x.data = np.where(np.abs(x.data - pt) < margin, fill, x.data)
    return x


def op_cases(seed: int = 0) -> dict:
    """name -> (fn, inputs); the name matches the op label recorded on graph nodes."""
    rng = stream(seed, "gradcheck")
    cases = {}
    unary = {
        "sqrt": (nt.sqrt, (0.5, 2.0)),
        "square": (nt.square, (-2.0, 2.0)),
        "abs": (nt.tabs, (0.1, 2.0)),
        "exp": (nt.exp, (-2.0, 2.0)),
        "log": (nt.log, (0.5, 2.0)),
        "arccos": (nt.arccos, (-0.9, 0.9)),
        "gelu": (nt.gelu, (-3.0, 3.0)),
        "sum": (lambda x: nt.tsum(x, axis=1, keepdims=True), (-2.0, 2.0)),
        "mean": (lambda x: nt.mean(x, axis=0), (-2.0, 2.0)),
        "l2norm": (lambda x: nt.l2norm(x, axis=-1), (-2.0, 2.0)),
        "softmax": (lambda x: nt.softmax(x, axis=-1), (-3.0, 3.0)),
        "log_softmax": (lambda x: nt.log_softmax(x, axis=-1), (-3.0, 3.0)),
        "reshape": (lambda x: nt.reshape(x, (2, -1)), (-2.0, 2.0)),
        "transpose": (nt.transpose, (-2.0, 2.0)),
        "getitem": (lambda x: x[np.array([0, 2, 0]), 1:], (-2.0, 2.0)),
    }
    for name, (fn, (lo, hi)) in unary.items():
        cases[name] = _probe(rng, fn, _p(rng, 3, 4, lo=lo, hi=hi))
    cases["clamp"] = _probe(rng, lambda x: nt.clamp(x, -1.0, 1.0), _away_from(_p(rng, 3, 4), (-1.0, 1.0)))
    for name, fn in {"add": nt.add, "sub": nt.sub, "mul": nt.mul, "div": nt.div,
                     "dot": lambda a, b: nt.dot(a, b, axis=-1),
                     "concat": lambda a, b: nt.concat([a, b], axis=0)}.items():
        cases[name] = _probe(rng, fn, _p(rng, 3, 4), _p(rng, 3, 4, lo=0.5, hi=2.0))
    cases["matmul"] = _probe(rng, nt.matmul, _p(rng, 2, 3, 4), _p(rng, 4, 5))
    cases["layernorm"] = _probe(rng, nt.layernorm, _p(rng, 2, 3, 6), _p(rng, 6), _p(rng, 6))

    # composite losses
    pred, tgt = _p(rng, 6, 5, lo=0.05, hi=1.0), Tensor(rng.uniform(0.05, 1.0, size=(6, 5)))
    cases["loss.huber"] = (lambda: huber_loss(pred, tgt, 0.4), [pred])
    pred2 = _p(rng, 6, 5, lo=0.05, hi=1.0)
    cases["loss.sam"] = (lambda: sam_loss(pred2, tgt), [pred2])
    x = _p(rng, 6, 3)
    A = _p(rng, 5, 3, lo=0.05, hi=0.95)
    cases["loss.phys"] = (lambda: phys_loss(tgt, nt.softmax(x, axis=-1), A), [x, A])
    return cases


def tiny_objective(seed: int = 0):
    """Full weighted objective on a D=16, 1+1 layer, M=3 model; returns (fn, trainable inputs)."""
    cfg = ModelConfig(image_size=8, patch_size=2, bands=4, embed_dim=16, decoder_dim=8, heads=2,
                      encoder_depth=1, decoder_depth=1, endmember_count=3, mask_ratio=0.5)
    params = init_params(cfg, seed)
    rng = stream(seed, "gradcheck-data")
    for k, t in params.trainable():  # perturb zero-initialised tensors so every path is exercised
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    cubes = rng.uniform(0.05, 0.95, size=(2, 8, 8, 4))
    tokens = patchify(cubes, cfg.patch_size)
    plans = [make_mask(cfg.num_tokens, cfg.mask_ratio, seed, i) for i in range(2)]
    weights = LossWeights(1.0, 0.5, 0.5, delta=0.1)

    def fn():
        return total_loss(forward(tokens, plans, params, cfg), tokens, cfg.bands, weights).total
    return fn, [t for _, t in params.trainable()]


def run_suite(seed: int = 0, step: float = 1e-5, corrupt: str | None = None, end_to_end: bool = True) -> dict:
    """Relative errors per op and end to end; ``corrupt`` scales that op's backward rule."""
    ctx = nt.inject_fault(corrupt) if corrupt else contextlib.nullcontext()
    errors = {}
    with ctx:
        for name, (fn, inputs) in op_cases(seed).items():
            errors[name] = nt.gradcheck(fn, inputs, step)
        if end_to_end:
            fn, inputs = tiny_objective(seed)
            errors["objective"] = nt.gradcheck(fn, inputs, step)
    failed = sorted(k for k, v in errors.items() if not v < THRESHOLD)
    return {"step": step, "threshold": THRESHOLD, "errors": errors, "max_error": max(errors.values()),
            "failed": failed, "passed": not failed}
