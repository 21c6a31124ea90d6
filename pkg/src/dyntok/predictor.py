"""Token keep/drop prediction module and differentiable hard sampling."""

from __future__ import annotations

import numpy as np

from dyntok import tensor as T
from dyntok.tensor import Tensor

LOG_EPS = 1e-9


def init_predictor(dim: int, rng: np.random.Generator, prefix: str = "") -> dict[str, Tensor]:
    """Fresh parameters for one sparsification stage (embed dim ``dim``)."""
    if dim % 4:
        raise ValueError(f"predictor needs embed dim divisible by 4, got {dim}")
    half, quarter = dim // 2, dim // 4

    def w(fan_in, fan_out):
        return _trunc_normal(rng, (fan_in, fan_out))

    shapes = {
        "local.ln_g": np.ones(dim),
        "local.ln_b": np.zeros(dim),
        "local.w": w(dim, half),
        "local.b": np.zeros(half),
        "global.ln_g": np.ones(dim),
        "global.ln_b": np.zeros(dim),
        "global.w": w(dim, half),
        "global.b": np.zeros(half),
        "head.w1": w(dim, half),
        "head.b1": np.zeros(half),
        "head.w2": w(half, quarter),
        "head.b2": np.zeros(quarter),
        "head.w3": w(quarter, 2),
        "head.b3": np.zeros(2),
    }
    return {prefix + k: Tensor(v, requires_grad=True, name=prefix + k) for k, v in shapes.items()}


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _branch(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    h = T.layer_norm(x, p[f"{name}.ln_g"], p[f"{name}.ln_b"])
    return T.gelu(T.linear(h, p[f"{name}.w"], p[f"{name}.b"]))


def local_features(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Per-token LN -> Linear(C, C/2) -> GELU."""
    return _branch(x, params, "local")


def agg(u: Tensor, mask: Tensor) -> Tensor:
    """Mean of ``u`` (B, n, C') over the tokens where ``mask`` (B, n) is set."""
    mask = T.as_tensor(mask)
    counts = mask.data.sum(axis=-1)
    if (counts <= 0).any():
        raise ValueError("agg needs at least one kept token per sample")
    weighted = T.tsum(T.mul(u, T.reshape(mask, mask.shape + (1,))), axis=1)
    return T.div(weighted, T.reshape(T.tsum(mask, axis=-1), (mask.shape[0], 1)))


def predict_probs(x: Tensor, mask: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Keep/drop probabilities (B, n, 2) for every token of ``x``; column 1 is keep."""
    b, n, _ = x.shape
    z_local = local_features(x, params)
    z_global = agg(_branch(x, params, "global"), mask)
    half = z_global.shape[-1]
    z_global = T.mul(T.reshape(z_global, (b, 1, half)), np.ones((1, n, 1)))
    z = T.concat_last_dim([z_local, z_global])
    h = T.gelu(T.linear(z, params["head.w1"], params["head.b1"]))
    h = T.gelu(T.linear(h, params["head.w2"], params["head.b2"]))
    return T.softmax_rows(T.linear(h, params["head.w3"], params["head.b3"]))


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    # u == 0 has probability ~2^-53; keep log finite regardless
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0)
    return -np.log(-np.log(u))


def gumbel_sample(
    pi: Tensor,
    temperature: float = 1.0,
    rng: np.random.Generator | int | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Straight-through Gumbel-Softmax over the last axis of ``pi``; returns the keep column.

    The forward value is the hard one-hot argmax of ``(log pi + g) / temperature``;
    the backward pass uses the soft relaxation. Pass ``noise`` to freeze the
    Gumbel draws (gradient checks).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    pi = T.as_tensor(pi)
    if noise is None:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        noise = gumbel_noise(pi.shape, rng)
    logits = T.log(T.add(pi, LOG_EPS))
    soft = T.softmax_rows(T.mul(T.add(logits, noise), 1.0 / temperature))
    hard = (soft.data.argmax(axis=-1)[..., None] == np.arange(pi.shape[-1])).astype(pi.dtype)
    return T.straight_through(hard, soft)[..., 1]


def update_mask(prev: Tensor, new: Tensor) -> Tensor:
    """Hadamard update of full-length masks (class token at index 0, forced to 1)."""
    prev, new = T.as_tensor(prev), T.as_tensor(new)
    if prev.shape != new.shape:
        raise T.ShapeError(f"mask shapes differ: {prev.shape} vs {new.shape}")
    patches = T.mul(prev[:, 1:], new[:, 1:])
    return T.concat([np.ones((prev.shape[0], 1), dtype=prev.dtype), patches], axis=1)
