"""Synthetic hyperspectral tiles that follow the linear mixing model exactly.

Each pixel spectrum is ``A @ x + e`` with ``A`` a C x M matrix of smooth
endmember spectra, ``x`` a point on the probability simplex and ``e`` i.i.d.
Gaussian noise. Ground truth is kept alongside the cube so recovery can be
scored later.

On-disk containers share one layout: a 4-byte magic, three little-endian
uint32 extents and a float32 little-endian payload in C order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .rng import stream

CUBE_MAGIC = b"HSC1"
ENDMEMBER_MAGIC = b"EMM1"
ABUNDANCE_MAGIC = b"ABF1"
LABEL_MAGIC = b"LBL1"
_HEADER = struct.Struct("<4sIII")
_MAX_SCALARS = 1 << 31


class GenerationError(RuntimeError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class HyperCube:
    """H x W x C cube, band-interleaved by pixel."""

    values: np.ndarray
    data_range: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"cube must be H x W x C, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cube contains non-finite values")
        if self.values.min(initial=0.0) < 0 or self.values.max(initial=0.0) > self.data_range:
            raise ValueError(f"cube values outside [0, {self.data_range}]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass
class GroundTruth:
    endmembers: np.ndarray  # C x M
    abundances: np.ndarray  # H x W x M
    noise_sigma: float = 0.0


@dataclass
class DataConfig:
    n_tiles: int = 64
    height: int = 32
    width: int = 32
    bands: int = 16
    endmembers: int = 4
    concentration: float = 0.5
    noise_sigma: float = 0.0
    data_range: float = 1.0
    min_separation: float = 0.15
    seed: int = 0


# -- spectra and abundances ---------------------------------------------------

def spectral_angle(a: np.ndarray, b: np.ndarray) -> float:
    cos = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def _bump_spectrum(rng: np.random.Generator, C: int) -> np.ndarray:
    grid = np.arange(C, dtype=np.float64)
    s = np.zeros(C)
    for _ in range(rng.integers(3, 7)):
        center = rng.uniform(0, C - 1)
        width = rng.uniform(0.05, 0.3) * C
        s += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((grid - center) / width) ** 2)
    lo, hi = s.min(), s.max()
    if hi - lo < 1e-12:
        return np.full(C, 0.5)
    return 0.05 + 0.9 * (s - lo) / (hi - lo)


def sample_endmembers(C: int, M: int, seed: int, min_separation: float = 0.15,
                      max_retries: int = 100) -> np.ndarray:
    """M smooth spectra (columns) in [0.05, 0.95], pairwise angle >= ``min_separation``."""
    if M < 2 or C < M:
        raise ValueError(f"need M >= 2 and C >= M, got C={C}, M={M}")
    rng = stream(seed, "endmembers")
    cols: list[np.ndarray] = []
    for j in range(M):
        for _ in range(max_retries):
            cand = _bump_spectrum(rng, C)
            if all(spectral_angle(cand, c) >= min_separation for c in cols):
                cols.append(cand)
                break
        else:
            raise GenerationError(
                f"column {j}: separation {min_separation} rad not reached after {max_retries} draws")
    return np.stack(cols, axis=1)


def project_rows_to_simplex(x: np.ndarray) -> np.ndarray:
    """Clip negatives and renormalise each last-axis vector to sum to one."""
    x = np.clip(x, 0.0, None)
    return x / x.sum(axis=-1, keepdims=True)


def sample_abundance_field(H: int, W: int, M: int, concentration: float, seed: int,
                           index: int = 0) -> np.ndarray:
    """Symmetric-Dirichlet abundances, box-blurred once (3x3) and re-projected to the simplex."""
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    if M < 1:
        raise ValueError("M must be >= 1")
    if M == 1:
        return np.ones((H, W, 1))
    rng = stream(seed, "abundances", index)
    x = rng.dirichlet(np.full(M, float(concentration)), size=(H, W))
    # small concentrations can underflow to an all-zero draw
    bad = ~np.isfinite(x).all(axis=-1) | (x.sum(axis=-1) <= 0)
    if bad.any():
        x[bad] = np.eye(M)[rng.integers(0, M, size=int(bad.sum()))]
    x = uniform_filter(x, size=(3, 3, 1), mode="nearest")
    return project_rows_to_simplex(x)


def mix(gt: GroundTruth, seed: int = 0, index: int = 0, data_range: float = 1.0) -> HyperCube:
    """Apply ``A @ x`` per pixel, add Gaussian noise, clamp to [0, data_range]."""
    A, x = np.asarray(gt.endmembers, float), np.asarray(gt.abundances, float)
    if A.shape[1] != x.shape[-1]:
        raise ValueError(f"endmembers {A.shape} do not match abundances {x.shape}")
    r = x @ A.T
    if gt.noise_sigma > 0:
        r = r + stream(seed, "noise", index).normal(0.0, gt.noise_sigma, size=r.shape)
    return HyperCube(np.clip(r, 0.0, data_range), data_range)


def derive_labels(gt: GroundTruth) -> np.ndarray:
    """Dominant endmember per pixel; ties go to the lowest index."""
    return np.argmax(np.asarray(gt.abundances), axis=-1)


# -- binary containers ------------------------------------------------------------

def write_container(path, magic: bytes, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"container payload must be 2-D or 3-D, got {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, *arr.shape))
        f.write(payload.tobytes())


def read_container(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"header truncated: {len(raw)} bytes", len(raw))
    got, d0, d1, d2 = _HEADER.unpack_from(raw, 0)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    n = d0 * d1 * d2
    if n > _MAX_SCALARS:
        raise FormatError(f"extents {d0}x{d1}x{d2} overflow the scalar limit", 4)
    need = _HEADER.size + 4 * n
    if len(raw) < need:
        raise FormatError(f"payload truncated: declared {n} scalars, found {(len(raw) - _HEADER.size) // 4}",
                          len(raw))
    if len(raw) > need:
        raise FormatError(f"{len(raw) - need} trailing bytes after declared payload", need)
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_HEADER.size)
    return data.astype(np.float64).reshape(d0, d1, d2)


def write_cube(cube: HyperCube, path) -> None:
    """Store as float32; values already float32-representable round-trip bit-exactly."""
    write_container(path, CUBE_MAGIC, cube.values)


def read_cube(path, data_range: float | None = None) -> HyperCube:
    values = read_container(path, CUBE_MAGIC)
    if data_range is None:
        side = Path(str(path).rsplit(".", 1)[0] + ".json")
        data_range = json.loads(side.read_text()).get("data_range", 1.0) if side.exists() else 1.0
    return HyperCube(values, data_range)


# -- datasets --------------------------------------------------------------------

@dataclass
class Tile:
    cube: HyperCube
    truth: GroundTruth
    labels: np.ndarray = field(repr=False, default=None)


def generate_tiles(cfg: DataConfig) -> tuple[np.ndarray, list[Tile]]:
    """All tiles share one endmember matrix; each tile draws its own abundances and noise."""
    A = sample_endmembers(cfg.bands, cfg.endmembers, cfg.seed, cfg.min_separation)
    tiles = []
    for i in range(cfg.n_tiles):
        x = sample_abundance_field(cfg.height, cfg.width, cfg.endmembers, cfg.concentration, cfg.seed, i)
        gt = GroundTruth(A, x, cfg.noise_sigma)
        cube = mix(gt, cfg.seed, i, cfg.data_range)
        # quantise now so in-memory tiles match what a file round-trip returns
        cube = HyperCube(cube.values.astype(np.float32).astype(np.float64), cfg.data_range)
        tiles.append(Tile(cube, gt, derive_labels(gt)))
    return A, tiles


def write_dataset(cfg: DataConfig, out_dir) -> Path:
    """Write cubes, ground truth, labels and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    A, tiles = generate_tiles(cfg)
    write_container(out / "endmembers.emm", ENDMEMBER_MAGIC, A)
    entries = []
    for i, tile in enumerate(tiles):
        stem = f"tile_{i:04d}"
        write_cube(tile.cube, out / f"{stem}.hsc")
        write_container(out / f"{stem}.abf", ABUNDANCE_MAGIC, tile.truth.abundances)
        write_container(out / f"{stem}.lbl", LABEL_MAGIC, tile.labels.astype(np.float32))
        sidecar = {
            "data_range": cfg.data_range, "noise_sigma": cfg.noise_sigma, "M": cfg.endmembers,
            "seed": cfg.seed, "tile_index": i,
            "endmembers": "endmembers.emm", "abundances": f"{stem}.abf", "labels": f"{stem}.lbl",
        }
        (out / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        entries.append({"cube": f"{stem}.hsc", "sidecar": f"{stem}.json", "seed": cfg.seed, "tile_index": i})
    manifest = {"config": asdict(cfg), "M": cfg.endmembers, "noise_sigma": cfg.noise_sigma,
                "endmembers": "endmembers.emm", "tiles": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(directory) -> tuple[np.ndarray | None, list[Tile]]:
    """Read a directory written by :func:`write_dataset`."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    A = read_container(d / manifest["endmembers"], ENDMEMBER_MAGIC)[:, :, 0] if manifest.get("endmembers") else None
    tiles = []
    for entry in manifest["tiles"]:
        side = json.loads((d / entry["sidecar"]).read_text())
        cube = read_cube(d / entry["cube"], side.get("data_range", 1.0))
        truth, labels = None, None
        if "abundances" in side:
            truth = GroundTruth(A, read_container(d / side["abundances"], ABUNDANCE_MAGIC),
                                side.get("noise_sigma", 0.0))
        if "labels" in side:
            labels = read_container(d / side["labels"], LABEL_MAGIC)[:, :, 0].astype(np.int64)
        tiles.append(Tile(cube, truth, labels))
    return A, tiles
