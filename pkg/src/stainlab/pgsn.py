"""Toy-scale prompt-conditioned generator with prompt-guided style normalization.

The forward path is: encoder conv -> image-conditioned prompt bias -> N x
(residual block -> PGSN) -> decoder conv -> sigmoid -> 8-bit RGB. Only the
PGSN layer carries an analytic backward pass.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import DEFAULT_EPS, avg_pool_global, conv2d, instance_norm, layer_norm, max_pool_global, sigmoid
from .errors import CacheMismatchError, ConfigError, DimensionError
from .io import load_checkpoint, load_prompt_vector, save_checkpoint

MAX_SIZE = 64
MAX_CHANNELS = 32
MAX_BLOCKS = 6


@dataclass(frozen=True)
class PromptEmbedding:
    stain: str
    vec: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vec, dtype=np.float64).ravel()
        if not np.all(np.isfinite(v)):
            raise ValueError(f"prompt embedding for {self.stain} is not finite")
        object.__setattr__(self, "vec", v)


def load_prompt_embedding(path, stain: str) -> PromptEmbedding:
    return PromptEmbedding(stain, load_prompt_vector(path, stain))


def seeded_prompts(stains, dim: int, seed: int = 0) -> dict:
    """Orthonormal stand-in embeddings, one per stain, for use without a text encoder."""
    stains = list(stains)
    if dim < len(stains):
        raise ValueError(f"need dim >= {len(stains)} for orthonormal prompts")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, len(stains))))
    return {s: PromptEmbedding(s, q[:, i].copy()) for i, s in enumerate(stains)}


# ---------------------------------------------------------------------------
# Prompt bias and modulation
# ---------------------------------------------------------------------------


@dataclass
class BiasParams:
    """Shared two-layer MLP applied to both pooled descriptors, then a 1x1 projection to E."""

    w1: np.ndarray  # (C, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, M)
    b2: np.ndarray
    w_out: np.ndarray  # (2M, E)
    b_out: np.ndarray

    def mlp(self, v):
        return np.maximum(v @ self.w1 + self.b1, 0.0) @ self.w2 + self.b2


def prompt_bias(x, params: BiasParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != params.w1.shape[0]:
        raise DimensionError(f"bias MLP expects {params.w1.shape[0]} channels, got input {x.shape}")
    if params.w_out.shape[0] != 2 * params.w2.shape[1]:
        raise DimensionError("projection input must be twice the MLP output width")
    z = np.concatenate([params.mlp(avg_pool_global(x)), params.mlp(max_pool_global(x))])
    return z @ params.w_out + params.b_out


def modulate(t_b, b) -> np.ndarray:
    t_b = t_b.vec if isinstance(t_b, PromptEmbedding) else np.asarray(t_b, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if t_b.shape != b.shape:
        raise DimensionError(f"prompt length {t_b.shape} != bias length {b.shape}")
    return t_b + b


# ---------------------------------------------------------------------------
# PGSN
# ---------------------------------------------------------------------------


@dataclass
class PgsnParams:
    gamma_w: np.ndarray  # (E, C)
    gamma_b: np.ndarray  # (C,)
    beta_w: np.ndarray
    beta_b: np.ndarray
    rho_raw: float = 0.0

    @property
    def rho(self) -> float:
        return float(sigmoid(np.array(self.rho_raw)))

    def project(self, t_i):
        t_i = np.asarray(t_i, dtype=np.float64)
        if t_i.shape != (self.gamma_w.shape[0],):
            raise DimensionError(f"prompt length {t_i.shape} does not match projection input {self.gamma_w.shape[0]}")
        return t_i @ self.gamma_w + self.gamma_b, t_i @ self.beta_w + self.beta_b


@dataclass
class PgsnCache:
    x_shape: tuple
    in_hat: np.ndarray
    ln_hat: np.ndarray
    in_std: np.ndarray
    ln_std: float
    gamma: np.ndarray
    beta: np.ndarray
    rho: float
    params: PgsnParams | None = None


@dataclass
class PgsnGrads:
    x: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    rho: float
    rho_raw: float | None = None
    t_i: np.ndarray | None = None


def pgsn_apply(x, gamma, beta, rho: float, eps: float = DEFAULT_EPS, return_cache: bool = False):
    """``gamma * (rho * IN(x) + (1 - rho) * LN(x)) + beta`` with per-channel gamma, beta."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"PGSN input must be (H, W, C), got {x.shape}")
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (x.shape[2],) or beta.shape != (x.shape[2],):
        raise DimensionError(f"gamma/beta must have {x.shape[2]} entries")
    a = instance_norm(x, eps)
    l = layer_norm(x, eps)
    out = gamma * (rho * a + (1.0 - rho) * l) + beta
    if not return_cache:
        return out
    cache = PgsnCache(
        x.shape,
        a,
        l,
        np.sqrt(x.var(axis=(0, 1)) + eps),
        float(np.sqrt(x.var() + eps)),
        gamma,
        beta,
        float(rho),
    )
    return out, cache


def pgsn_forward(x, t_i, params: PgsnParams, eps: float = DEFAULT_EPS, return_cache: bool = False):
    gamma, beta = params.project(t_i)
    res = pgsn_apply(x, gamma, beta, params.rho, eps, return_cache)
    if return_cache:
        res[1].params = params
    return res


def _norm_backward(d, y, std, axes):
    return (d - d.mean(axis=axes, keepdims=True) - y * (d * y).mean(axis=axes, keepdims=True)) / std


def pgsn_backward(upstream, cache: PgsnCache) -> PgsnGrads:
    """Analytic gradients of a PGSN layer given the upstream gradient.

    ``rho_raw`` and ``t_i`` gradients are filled in only when the cache came
    from :func:`pgsn_forward` (which knows the projection parameters).
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.x_shape:
        raise CacheMismatchError(f"upstream gradient {g.shape} does not match cached forward {cache.x_shape}")
    rho = cache.rho
    mix = rho * cache.in_hat + (1.0 - rho) * cache.ln_hat
    d_beta = g.sum(axis=(0, 1))
    d_gamma = (g * mix).sum(axis=(0, 1))
    gg = g * cache.gamma
    d_rho = float((gg * (cache.in_hat - cache.ln_hat)).sum())
    dx = _norm_backward(gg * rho, cache.in_hat, cache.in_std, (0, 1))
    dx += _norm_backward(gg * (1.0 - rho), cache.ln_hat, cache.ln_std, None)
    grads = PgsnGrads(dx, d_gamma, d_beta, d_rho)
    if cache.params is not None:
        p = cache.params
        grads.rho_raw = d_rho * rho * (1.0 - rho)
        grads.t_i = p.gamma_w @ d_gamma + p.beta_w @ d_beta
    return grads


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    n_blocks: int = 6
    channels: int = 8
    in_channels: int = 3
    embed_dim: int = 16
    hidden: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_blocks <= MAX_BLOCKS:
            raise ConfigError(f"n_blocks must be in [1, {MAX_BLOCKS}], got {self.n_blocks}")
        if not 1 <= self.channels <= MAX_CHANNELS:
            raise ConfigError(f"channels must be in [1, {MAX_CHANNELS}], got {self.channels}")
        if self.in_channels < 1 or self.embed_dim < 1 or self.hidden < 1:
            raise ConfigError("in_channels, embed_dim and hidden must be positive")


@dataclass
class ResBlock:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class GeneratorWeights:
    enc_w: np.ndarray
    enc_b: np.ndarray
    bias: BiasParams
    blocks: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    dec_w: np.ndarray = None
    dec_b: np.ndarray = None

    def to_dict(self) -> dict:
        out = {"enc_w": self.enc_w, "enc_b": self.enc_b, "dec_w": self.dec_w, "dec_b": self.dec_b}
        for k in ("w1", "b1", "w2", "b2", "w_out", "b_out"):
            out[f"bias.{k}"] = getattr(self.bias, k)
        for i, (blk, nrm) in enumerate(zip(self.blocks, self.norms)):
            for k in ("w1", "b1", "w2", "b2"):
                out[f"block{i}.{k}"] = getattr(blk, k)
            for k in ("gamma_w", "gamma_b", "beta_w", "beta_b"):
                out[f"pgsn{i}.{k}"] = getattr(nrm, k)
            out[f"pgsn{i}.rho_raw"] = np.array([nrm.rho_raw])
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorWeights":
        bias = BiasParams(*(d[f"bias.{k}"] for k in ("w1", "b1", "w2", "b2", "w_out", "b_out")))
        n = sum(1 for k in d if k.startswith("block") and k.endswith(".w1"))
        blocks = [ResBlock(*(d[f"block{i}.{k}"] for k in ("w1", "b1", "w2", "b2"))) for i in range(n)]
        norms = [
            PgsnParams(*(d[f"pgsn{i}.{k}"] for k in ("gamma_w", "gamma_b", "beta_w", "beta_b")), float(d[f"pgsn{i}.rho_raw"][0]))
            for i in range(n)
        ]
        return cls(d["enc_w"], d["enc_b"], bias, blocks, norms, d["dec_w"], d["dec_b"])

    def save(self, path) -> None:
        save_checkpoint(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "GeneratorWeights":
        return cls.from_dict(load_checkpoint(path))


def init_weights(cfg: GeneratorConfig) -> GeneratorWeights:
    """Uniform ``+-1/sqrt(fan_in)`` initialization drawn from ``cfg.seed``.

    PGSN affine biases start at gamma = 1, beta = 0 and every layer's rho at 0.5.
    """
    rng = np.random.default_rng(cfg.seed)

    def u(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    c, e, h = cfg.channels, cfg.embed_dim, cfg.hidden
    enc_w = u((3, 3, cfg.in_channels, c), 9 * cfg.in_channels)
    enc_b = u((c,), 9 * cfg.in_channels)
    bias = BiasParams(u((c, h), c), u((h,), c), u((h, c), h), u((c,), h), u((2 * c, e), 2 * c), u((e,), 2 * c))
    blocks, norms = [], []
    for _ in range(cfg.n_blocks):
        blocks.append(ResBlock(u((3, 3, c, c), 9 * c), u((c,), 9 * c), u((3, 3, c, c), 9 * c), u((c,), 9 * c)))
        norms.append(PgsnParams(u((e, c), e), np.ones(c), u((e, c), e), np.zeros(c), 0.0))
    return GeneratorWeights(enc_w, enc_b, bias, blocks, norms, u((3, 3, c, 3), 9 * c), u((3,), 9 * c))


def generator_forward(x, prompt, cfg: GeneratorConfig, weights: GeneratorWeights | None = None) -> np.ndarray:
    """Render an 8-bit RGB image from an ``H x W x Cin`` input in [0, 1].

    ``prompt`` is the base stain embedding; the image-conditioned bias is added
    to it before it drives every PGSN layer. When ``weights`` is None they are
    initialized from ``cfg.seed``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != cfg.in_channels:
        raise DimensionError(f"expected (H, W, {cfg.in_channels}) input, got {x.shape}")
    if x.shape[0] > MAX_SIZE or x.shape[1] > MAX_SIZE:
        raise DimensionError(f"toy generator accepts at most {MAX_SIZE}x{MAX_SIZE} inputs, got {x.shape[:2]}")
    w = weights if weights is not None else init_weights(cfg)
    if len(w.blocks) != cfg.n_blocks:
        raise ConfigError(f"weights hold {len(w.blocks)} blocks, config expects {cfg.n_blocks}")
    t_b = prompt.vec if isinstance(prompt, PromptEmbedding) else np.asarray(prompt, dtype=np.float64)
    h = np.maximum(conv2d(x, w.enc_w) + w.enc_b, 0.0)
    t_i = modulate(t_b, prompt_bias(h, w.bias))
    for blk, nrm in zip(w.blocks, w.norms):
        r = np.maximum(conv2d(h, blk.w1) + blk.b1, 0.0)
        h = h + conv2d(r, blk.w2) + blk.b2
        h = pgsn_forward(h, t_i, nrm)
    out = sigmoid(conv2d(h, w.dec_w) + w.dec_b)
    return np.round(out * 255.0).astype(np.uint8)
