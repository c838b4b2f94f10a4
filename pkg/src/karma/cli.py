"""``karma`` command line: generate, pretrain, evaluate, unmix, sweep-m, downstream, gradcheck.

Exit codes: 0 success, 1 runtime or numeric failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .config import RunConfig, load_config, to_dict
from .metrics import align_endmembers, fcls_oracle
from .model import ConfigError, init_params, patch_mean_spectrum, patchify
from .ndtensor import NumericError, UsageError
from .synthgen import FormatError, GenerationError, generate_tiles, load_dataset, write_dataset
from .trainer import TrainingAborted, evaluate, load_training_state, pretrain, reconstruct, train_downstream

log = logging.getLogger("karma")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# -- helpers ----------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _dataset(cfg: RunConfig):
    """(endmembers or None, tiles) from ``cfg.dataset`` or generated in memory from ``cfg.data``."""
    if cfg.dataset:
        if not (Path(cfg.dataset) / "manifest.json").exists():
            raise CLIError(f"dataset '{cfg.dataset}' has no manifest.json", EXIT_USAGE)
        return load_dataset(cfg.dataset)
    return generate_tiles(cfg.data)


def _split(n: int, test_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Trailing tiles form the held-out split; at least one tile on each side when n > 1."""
    n_test = int(round(test_fraction * n))
    if n > 1:
        n_test = min(max(n_test, 1), n - 1)
    idx = np.arange(n)
    return idx[:n - n_test], idx[n - n_test:]


def _cubes(tiles, idx) -> np.ndarray:
    return np.stack([tiles[i].cube.values for i in idx])


def _data_range(tiles) -> float:
    return float(tiles[0].cube.data_range)


def _load_ckpt(path):
    if path is None:
        raise CLIError("--checkpoint is required for this command")
    if not Path(path).exists():
        raise CLIError(f"checkpoint '{path}' not found")
    return load_training_state(path)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    path = write_dataset(cfg.data, out)
    _write_json(out / "config.json", to_dict(cfg))
    log.info("wrote %d tiles and %s", cfg.data.n_tiles, path)
    return EXIT_OK


def _pretrain_run(cfg: RunConfig, out: Path | None, resume=None):
    _, tiles = _dataset(cfg)
    train_idx, _ = _split(len(tiles), cfg.eval.test_fraction)
    tcfg = cfg.train_config()
    if out is None:
        return pretrain(tcfg, _cubes(tiles, train_idx), resume=resume)
    with open(out / "train_log.jsonl", "a" if resume else "w") as sink:
        return pretrain(tcfg, _cubes(tiles, train_idx), out_dir=out, resume=resume, log_sink=sink)


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    _write_json(out / "config.json", to_dict(cfg))
    _pretrain_run(cfg, out, resume=args.resume)
    log.info("final checkpoint %s", out / "final.kckp")
    return EXIT_OK


def _eval_report(cfg: RunConfig, ckpt) -> dict:
    params, _, mcfg = _load_ckpt(ckpt)
    _, tiles = _dataset(cfg)
    _, test_idx = _split(len(tiles), cfg.eval.test_fraction)
    report, phys = evaluate(params, mcfg, _cubes(tiles, test_idx), _data_range(tiles), cfg.eval.mask_ratio,
                            cfg.eval.seed)
    return {"checkpoint": str(ckpt), **report.to_json(), "phys_loss": phys, "test_tiles": test_idx.tolist()}


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    rep = _eval_report(cfg, args.checkpoint)
    _write_json(out / "report.json", rep)
    if args.compare:
        base = _eval_report(cfg, args.compare)
        keys = ("avg_psnr", "max_channel_psnr", "avg_ssim", "max_channel_ssim", "mean_sam", "phys_loss")
        _write_json(out / "comparison.json", {
            "candidate": rep, "reference": base,
            "delta": {k: rep[k] - base[k] for k in keys if k in rep and k in base}})
    print(json.dumps({k: rep[k] for k in ("avg_psnr", "avg_ssim")}, sort_keys=True))
    return EXIT_OK


def cmd_unmix(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    params, _, mcfg = _load_ckpt(args.checkpoint)
    A_true, tiles = _dataset(cfg)
    _, test_idx = _split(len(tiles), cfg.eval.test_fraction)
    cubes = _cubes(tiles, test_idx)
    A = params["endmembers"].data
    _, abund, phys = reconstruct(params, mcfg, cubes, mask_ratio=0.0)
    np.save(out / "abundances.npy", abund)
    np.save(out / "endmembers.npy", A)

    pixels = cubes.reshape(-1, mcfg.bands)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fcls_oracle(pixels, A, iters=2000, tol=1e-12)
        means = patch_mean_spectrum(patchify(cubes, mcfg.patch_size), bands=mcfg.bands).reshape(-1, mcfg.bands)
        token_fit = fcls_oracle(means, A, iters=2000, tol=1e-12)
    report = {
        "endmembers_shape": list(A.shape),
        "phys_loss": phys,
        "abundance_sum_max_dev": float(np.max(np.abs(abund.sum(axis=-1) - 1.0))),
        "fcls_learned_mean_residual": float(np.mean(np.sqrt(fit.residual))),
        "head_vs_fcls_abundance_mae": float(np.mean(np.abs(abund.reshape(-1, A.shape[1]) - token_fit.abundances))),
        "alignment": None,
    }
    if A_true is None:
        warnings.warn("dataset has no ground-truth endmembers; alignment skipped")
    elif A_true.shape != A.shape:
        msg = f"learned A {A.shape} vs ground truth {A_true.shape}; alignment skipped"
        warnings.warn(msg)
        log.warning(msg)
    else:
        perm, score = align_endmembers(A, A_true)
        report["alignment"] = {"perm": list(perm), "mean_sam": score}
    if A_true is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report["fcls_true_mean_residual"] = float(np.mean(np.sqrt(fcls_oracle(pixels, A_true, iters=2000,
                                                                                  tol=1e-12).residual)))
    _write_json(out / "unmix.json", report)
    print(json.dumps({"alignment": report["alignment"],
                      "fcls_learned_mean_residual": report["fcls_learned_mean_residual"]}, sort_keys=True))
    return EXIT_OK


def _sweep_one(raw: dict, M: int) -> dict:
    from .config import from_dict
    cfg = from_dict(raw)
    cfg.model.endmember_count = M
    cfg.model.validate()
    _, tiles = _dataset(cfg)
    train_idx, test_idx = _split(len(tiles), cfg.eval.test_fraction)
    params, _ = pretrain(cfg.train_config(), _cubes(tiles, train_idx))
    report, phys = evaluate(params, cfg.model, _cubes(tiles, test_idx), _data_range(tiles), cfg.eval.mask_ratio,
                            cfg.eval.seed)
    return {"M": M, "avg_psnr": report.avg_psnr, "avg_ssim": report.avg_ssim, "phys_loss": phys}


def cmd_sweep_m(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    m_list = [int(m) for m in (args.m_list.split(",") if args.m_list else cfg.sweep.m_list)]
    if not m_list or min(m_list) < 2:
        raise CLIError("sweep needs M values >= 2")
    raw = to_dict(cfg)
    if cfg.sweep.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.sweep.jobs) as pool:
            rows = list(pool.map(_sweep_one, [raw] * len(m_list), m_list))
    else:
        rows = [_sweep_one(raw, M) for M in m_list]
    with open(out / "sweep_m.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["M", "avg_psnr", "avg_ssim", "phys_loss"])
        for r in rows:
            writer.writerow([r["M"], repr(r["avg_psnr"]), repr(r["avg_ssim"]), repr(r["phys_loss"])])
    return EXIT_OK


def cmd_downstream(cfg: RunConfig, args) -> int:
    out = _out_dir(args)
    if args.random_init:
        mcfg = cfg.model
        params = init_params(mcfg, cfg.train.seed)
    else:
        params, _, mcfg = _load_ckpt(args.checkpoint)
    _, tiles = _dataset(cfg)
    if any(t.labels is None for t in tiles):
        raise CLIError("dataset has no labels")
    cubes = np.stack([t.cube.values for t in tiles])
    labels = np.stack([t.labels for t in tiles])
    num_classes = int(max(labels.max() + 1, cfg.data.endmembers))
    _, report, info = train_downstream(params, mcfg, cubes, labels, num_classes, cfg.downstream)
    _write_json(out / "downstream.json", {**report.to_json(), **info})
    print(json.dumps({"overall_top1": report.macro["overall_top1"], "majority_top1": info["majority_top1"]},
                     sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .gradsuite import run_suite
    out = _out_dir(args)
    report = run_suite(seed=cfg.train.seed, corrupt=args.corrupt)
    text = json.dumps(report, indent=2, sort_keys=True)
    (out / "gradcheck.json").write_text(text + "\n")
    print(text)
    if not report["passed"]:
        print(f"gradient check failed for: {', '.join(report['failed'])}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "evaluate": cmd_evaluate,
    "unmix": cmd_unmix,
    "sweep-m": cmd_sweep_m,
    "downstream": cmd_downstream,
    "gradcheck": cmd_gradcheck,
}


# -- parser ------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CLIError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--override", action="append", default=[], metavar="K=V",
                        help="dotted config override, repeatable (value parsed as JSON)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, help="seed for training, evaluation and generation")

    parser = _Parser(prog="karma", description="Physics-guided masked autoencoder for hyperspectral cubes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("pretrain", parents=[common], help="masked-reconstruction pretraining")
    p.add_argument("--resume", help="checkpoint to resume from")
    p = sub.add_parser("evaluate", parents=[common], help="masked-reconstruction report on the held-out tiles")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--compare", help="second checkpoint; writes comparison.json with deltas")
    p = sub.add_parser("unmix", parents=[common], help="learned endmembers, abundances and oracle comparison")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("sweep-m", parents=[common], help="pretrain + evaluate over endmember counts")
    p.add_argument("--m-list", help="comma separated M values (default: sweep.m_list)")
    p = sub.add_parser("downstream", parents=[common], help="frozen-encoder segmentation head")
    p.add_argument("--checkpoint")
    p.add_argument("--random-init", action="store_true", help="use an untrained encoder built from the config")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("KARMA_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CLIError(f"KARMA_LOG_LEVEL must be one of {sorted(levels)}, got '{level}'")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, args.override)
        if args.seed is not None:
            cfg.train.seed = cfg.eval.seed = cfg.downstream.seed = args.seed
            if args.command == "generate":
                cfg.data.seed = args.seed
        if args.command == "downstream" and not args.random_init and not args.checkpoint:
            raise CLIError("downstream needs --checkpoint or --random-init")
        return COMMANDS[args.command](cfg, args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (NumericError, UsageError, GenerationError, FormatError, CheckpointError, FloatingPointError,
            OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError) as exc:  # inputs that do not fit the configuration
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
