"""ViT masked autoencoder with a linear-mixing abundance branch in the decoder.

Tokens are flattened patches (pixels row-major, bands contiguous per pixel).
The encoder only sees visible tokens. The decoder re-inserts a shared mask
token at hidden positions and feeds two heads: a pixel head that predicts
the P*P*C values of each token, and an abundance head whose softmax output
``x`` is mixed through the learnable endmember matrix ``A`` (``A @ x``).
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nt
from .ndtensor import Tensor
from .rng import stream


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    bands: int = 16
    embed_dim: int = 64
    decoder_dim: int | None = None  # defaults to embed_dim // 2
    heads: int = 8
    encoder_depth: int = 2
    decoder_depth: int = 1
    mask_ratio: float = 0.75
    endmember_count: int = 4
    mlp_ratio: float = 4.0
    endmember_init: str = "uniform"  # "uniform" | "centroid"

    def __post_init__(self):
        if self.decoder_dim is None:
            self.decoder_dim = self.embed_dim // 2
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for name, dim in (("embed_dim", self.embed_dim), ("decoder_dim", self.decoder_dim)):
            if dim % self.heads:
                raise ConfigError(f"{name} {dim} not divisible by heads {self.heads}")
            if dim % 2:
                raise ConfigError(f"{name} {dim} must be even")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.endmember_count < 2:
            raise ConfigError(f"endmember_count must be >= 2, got {self.endmember_count}")
        if self.endmember_init not in ("uniform", "centroid"):
            raise ConfigError(f"endmember_init must be 'uniform' or 'centroid', got {self.endmember_init!r}")
        if min(self.bands, self.encoder_depth, self.decoder_depth) < 1:
            raise ConfigError("bands and depths must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * self.bands


# -- parameters ------------------------------------------------------------------

class ParamStore:
    """Ordered name -> Tensor table. Buffers are stored but never optimised."""

    def __init__(self):
        self.tensors: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: set[str] = set()

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable)
        self.tensors[name] = t
        if not trainable:
            self.buffers.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self):
        return [(k, t) for k, t in self.tensors.items() if k not in self.buffers]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, t.data.copy()) for k, t in self.tensors.items())

    def load_state(self, state) -> None:
        missing = set(self.tensors) - set(state)
        extra = set(state) - set(self.tensors)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.tensors.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != t.shape:
                raise ValueError(f"{k}: shape {value.shape} != {t.shape}")
            t.data = value.copy()

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for k, t in self.tensors.items():
            if k.startswith(prefix):
                h.update(k.encode())
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def sincos_pos_embed(grid: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine table, (grid*grid) x dim; falls back to 1-D when dim % 4 != 0."""
    def embed_1d(d, pos):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    if dim % 4 == 0:
        return np.concatenate([embed_1d(dim // 2, rows.ravel()), embed_1d(dim // 2, cols.ravel())], axis=1)
    return embed_1d(dim, np.arange(grid * grid))


def _linear(store: ParamStore, rng, name: str, fan_in: int, fan_out: int) -> None:
    bound = 1.0 / np.sqrt(fan_in)
    store.add(f"{name}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{name}.bias", np.zeros(fan_out))


def _block(store: ParamStore, rng, name: str, dim: int, mlp_ratio: float) -> None:
    hidden = int(dim * mlp_ratio)
    store.add(f"{name}.norm1.weight", np.ones(dim))
    store.add(f"{name}.norm1.bias", np.zeros(dim))
    for proj in ("q", "k", "v", "proj"):
        _linear(store, rng, f"{name}.attn.{proj}", dim, dim)
    store.add(f"{name}.norm2.weight", np.ones(dim))
    store.add(f"{name}.norm2.bias", np.zeros(dim))
    _linear(store, rng, f"{name}.mlp.fc1", dim, hidden)
    _linear(store, rng, f"{name}.mlp.fc2", hidden, dim)


def init_params(cfg: ModelConfig, seed: int = 0, mean_spectrum=None) -> ParamStore:
    """Fresh parameters. ``mean_spectrum`` (length C) seeds the centroid endmember init;
    without it the centroid init starts from a flat 0.5 spectrum."""
    rng = stream(seed, "init")
    D, Dd, T = cfg.embed_dim, cfg.decoder_dim, cfg.num_tokens
    store = ParamStore()
    _linear(store, rng, "patch_embed", cfg.token_dim, D)
    store.add("pos_embed", sincos_pos_embed(cfg.grid, D), trainable=False)
    for i in range(cfg.encoder_depth):
        _block(store, rng, f"encoder.{i}", D, cfg.mlp_ratio)
    store.add("encoder.norm.weight", np.ones(D))
    store.add("encoder.norm.bias", np.zeros(D))
    _linear(store, rng, "decoder_embed", D, Dd)
    store.add("mask_token", np.zeros((1, 1, Dd)))
    store.add("decoder_pos_embed", sincos_pos_embed(cfg.grid, Dd), trainable=False)
    for i in range(cfg.decoder_depth):
        _block(store, rng, f"decoder.{i}", Dd, cfg.mlp_ratio)
    store.add("decoder.norm.weight", np.ones(Dd))
    store.add("decoder.norm.bias", np.zeros(Dd))
    _linear(store, rng, "pixel_head", Dd, cfg.token_dim)
    _linear(store, rng, "abundance_head.fc1", Dd, Dd // 2)
    _linear(store, rng, "abundance_head.fc2", Dd // 2, cfg.endmember_count)
    if cfg.endmember_init == "centroid":
        # every column starts near the data centroid; the physics term pushes them apart
        centre = np.full(cfg.bands, 0.5) if mean_spectrum is None else np.asarray(mean_spectrum, np.float64)
        if centre.shape != (cfg.bands,):
            raise ConfigError(f"mean_spectrum has shape {centre.shape}, expected ({cfg.bands},)")
        jitter = 1.0 + 0.01 * rng.standard_normal((cfg.bands, cfg.endmember_count))
        store.add("endmembers", centre[:, None] * jitter)
    else:
        store.add("endmembers", rng.uniform(0.0, 1.0, size=(cfg.bands, cfg.endmember_count)))
    assert T == store["pos_embed"].shape[0]
    return store


def no_decay_names(store: ParamStore) -> set[str]:
    """Biases, norm affines, the mask token: excluded from weight decay."""
    return {k for k, t in store.trainable() if t.ndim < 2 or k == "mask_token"}


# -- patches and masks ---------------------------------------------------------------

def patchify(values: np.ndarray, P: int) -> np.ndarray:
    """(..., H, W, C) -> (..., T, P*P*C) with patches in row-major order."""
    *lead, H, W, C = values.shape
    if H % P or W % P:
        raise ConfigError(f"cube {H}x{W} not divisible by patch size {P}")
    gh, gw = H // P, W // P
    x = values.reshape(*lead, gh, P, gw, P, C)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)  # (..., gh, gw, P, P, C)
    return x.reshape(*lead, gh * gw, P * P * C)


def unpatchify(tokens: np.ndarray, H: int, W: int, C: int, P: int) -> np.ndarray:
    *lead, T, _ = tokens.shape
    gh, gw = H // P, W // P
    n = len(lead)
    x = tokens.reshape(*lead, gh, gw, P, P, C)
    x = np.moveaxis(x, n + 1, n + 2)  # (..., gh, P, gw, P, C)
    return x.reshape(*lead, H, W, C)


def patch_mean_spectrum(tokens: np.ndarray, t=None, bands: int | None = None) -> np.ndarray:
    """Mean spectrum over the pixels of token ``t`` (all tokens when ``t`` is None)."""
    tokens = np.asarray(tokens)
    if bands is None:
        raise ValueError("bands is required to split a token into pixels")
    pix = tokens.reshape(*tokens.shape[:-1], -1, bands)
    means = pix.mean(axis=-2)
    return means if t is None else means[..., t, :]


@dataclass
class MaskPlan:
    total_tokens: int
    visible: np.ndarray
    masked: np.ndarray

    def __post_init__(self):
        self.visible = np.asarray(self.visible, dtype=np.int64)
        self.masked = np.asarray(self.masked, dtype=np.int64)


def make_mask(T: int, ratio: float, seed: int, sample_index: int, purpose: str = "mask") -> MaskPlan:
    """Uniformly random subset of round(ratio*T) masked tokens; ratio 0 keeps all visible."""
    if not 0 <= ratio < 1:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    n_mask = int(np.floor(ratio * T + 0.5))
    perm = stream(seed, purpose, sample_index).permutation(T)
    return MaskPlan(T, np.sort(perm[n_mask:]), np.sort(perm[:n_mask]))


def full_plan(T: int) -> MaskPlan:
    return MaskPlan(T, np.arange(T), np.zeros(0, dtype=np.int64))


# -- layers ---------------------------------------------------------------------

def linear(x: Tensor, p: ParamStore, name: str) -> Tensor:
    return x @ p[f"{name}.weight"] + p[f"{name}.bias"]


def attention(x: Tensor, p: ParamStore, name: str, heads: int) -> Tensor:
    B, T, D = x.shape
    dh = D // heads

    def split(t):
        return nt.transpose(nt.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, p, f"{name}.q"))
    k = split(linear(x, p, f"{name}.k"))
    v = split(linear(x, p, f"{name}.v"))
    weights = nt.softmax((q @ nt.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)), axis=-1)
    out = nt.reshape(nt.transpose(weights @ v, (0, 2, 1, 3)), (B, T, D))
    return linear(out, p, f"{name}.proj")


def block(x: Tensor, p: ParamStore, name: str, heads: int) -> Tensor:
    h = nt.layernorm(x, p[f"{name}.norm1.weight"], p[f"{name}.norm1.bias"])
    x = x + attention(h, p, f"{name}.attn", heads)
    h = nt.layernorm(x, p[f"{name}.norm2.weight"], p[f"{name}.norm2.bias"])
    return x + linear(nt.gelu(linear(h, p, f"{name}.mlp.fc1")), p, f"{name}.mlp.fc2")


# -- forward ------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    pixel: Tensor           # B x T x P*P*C, every token
    pixel_recon: Tensor     # B x n_masked x P*P*C
    abundances: Tensor      # B x T x M
    phys_recon: Tensor      # B x T x C
    latent: Tensor          # B x n_visible x D
    plans: list[MaskPlan]


def _batch(tokens: np.ndarray, plans) -> tuple[np.ndarray, list[MaskPlan]]:
    tokens = np.asarray(tokens, dtype=np.float64)
    if isinstance(plans, MaskPlan):
        plans = [plans]
    if tokens.ndim == 2:
        tokens = tokens[None]
    if len(plans) != tokens.shape[0]:
        raise ValueError(f"{len(plans)} mask plans for a batch of {tokens.shape[0]}")
    counts = {len(pl.visible) for pl in plans}
    if len(counts) != 1:
        raise ValueError("all plans in a batch must keep the same number of visible tokens")
    for pl in plans:
        if pl.total_tokens != tokens.shape[1]:
            raise ValueError(f"plan covers {pl.total_tokens} tokens, input has {tokens.shape[1]}")
    return tokens, list(plans)


def encode(tokens: np.ndarray, plans, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Visible tokens -> B x n_visible x D latent."""
    tokens, plans = _batch(tokens, plans)
    vis = np.stack([pl.visible for pl in plans])
    rows = np.arange(tokens.shape[0])[:, None]
    x = linear(Tensor(tokens[rows, vis]), params, "patch_embed")
    x = x + params["pos_embed"].data[vis]
    for i in range(cfg.encoder_depth):
        x = block(x, params, f"encoder.{i}", cfg.heads)
    return nt.layernorm(x, params["encoder.norm.weight"], params["encoder.norm.bias"])


def abundance_head(z: Tensor, params: ParamStore) -> Tensor:
    h = nt.gelu(linear(z, params, "abundance_head.fc1"))
    return nt.softmax(linear(h, params, "abundance_head.fc2"), axis=-1)


def decode(latent: Tensor, plans, params: ParamStore, cfg: ModelConfig) -> ForwardOutput:
    if isinstance(plans, MaskPlan):
        plans = [plans]
    B, V, _ = latent.shape
    T = plans[0].total_tokens
    rows = np.arange(B)[:, None]
    y = linear(latent, params, "decoder_embed")
    n_mask = T - V
    if n_mask:
        fill = params["mask_token"] * np.ones((B, n_mask, 1))
        y = nt.concat([y, fill], axis=1)
    order = np.stack([np.concatenate([pl.visible, pl.masked]) for pl in plans])
    restore = np.argsort(order, axis=1)
    x = y[rows, restore] + params["decoder_pos_embed"].data
    for i in range(cfg.decoder_depth):
        x = block(x, params, f"decoder.{i}", cfg.heads)
    x = nt.layernorm(x, params["decoder.norm.weight"], params["decoder.norm.bias"])
    pixel = linear(x, params, "pixel_head")
    masked = np.stack([pl.masked for pl in plans])
    pixel_recon = pixel[rows, masked]
    abund = abundance_head(x, params)
    phys = abund @ nt.transpose(params["endmembers"])
    return ForwardOutput(pixel, pixel_recon, abund, phys, latent, plans)


def forward(tokens: np.ndarray, plans, params: ParamStore, cfg: ModelConfig) -> ForwardOutput:
    tokens, plans = _batch(tokens, plans)
    return decode(encode(tokens, plans, params, cfg), plans, params, cfg)


# -- downstream head ------------------------------------------------------------------

def init_head_params(dim: int, num_classes: int, seed: int = 0) -> ParamStore:
    rng = stream(seed, "head-init")
    store = ParamStore()
    _linear(store, rng, "head.conv", 9 * dim, dim // 2)
    _linear(store, rng, "head.fc", dim // 2, num_classes)
    return store


def unfold3x3(grid: Tensor) -> Tensor:
    """B x h x w x D -> B x h x w x 9D zero-padded 3x3 neighbourhoods (row-major offsets)."""
    B, h, w, D = grid.shape
    zr = Tensor(np.zeros((B, 1, w, D)))
    g = nt.concat([zr, grid, zr], axis=1)
    zc = Tensor(np.zeros((B, h + 2, 1, D)))
    g = nt.concat([zc, g, zc], axis=2)
    windows = [g[:, di:di + h, dj:dj + w, :] for di in range(3) for dj in range(3)]
    return nt.concat(windows, axis=-1)


def downstream_head(latent, head: ParamStore, grid: int) -> Tensor:
    """Per-token class logits from full-visibility latents (B x T x D -> B x T x K)."""
    latent = nt.as_tensor(latent)
    B, T, D = latent.shape
    if T != grid * grid:
        raise ValueError(f"{T} tokens do not form a {grid}x{grid} grid")
    cols = unfold3x3(nt.reshape(latent, (B, grid, grid, D)))
    h = nt.gelu(linear(cols, head, "head.conv"))
    logits = linear(h, head, "head.fc")
    return nt.reshape(logits, (B, T, logits.shape[-1]))


def encode_full(tokens: np.ndarray, params: ParamStore, cfg: ModelConfig) -> np.ndarray:
    """Latents for fully visible inputs, computed without recording a graph."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 2:
        tokens = tokens[None]
    plans = [full_plan(tokens.shape[1])] * tokens.shape[0]
    with nt.no_grad():
        return encode(tokens, plans, params, cfg).data
