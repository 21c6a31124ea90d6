"""Inference-time token selection: prediction top-k and the comparison baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dyntok import tensor as T
from dyntok.tensor import Tensor

STRATEGIES = ("prediction", "random", "attention_score", "static", "structural")


@dataclass(frozen=True)
class PruneSchedule:
    """Where to sparsify and how many patch tokens survive each stage.

    ``ratios`` overrides the default geometric targets ``[rho, rho^2, ...]``.
    """

    stage_blocks: tuple[int, ...] = ()
    rho: float = 1.0
    strategy: str = "prediction"
    ratios: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        if self.ratios is not None:
            object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
            if len(self.ratios) != len(self.stage_blocks):
                raise ValueError("ratios must have one entry per stage")
        if any(b2 <= b1 for b1, b2 in zip(self.stage_blocks, self.stage_blocks[1:])):
            raise ValueError(f"stage blocks must be strictly increasing: {self.stage_blocks}")
        if self.stage_blocks and self.stage_blocks[0] < 0:
            raise ValueError("stage blocks must be non-negative")
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")

    @property
    def targets(self) -> list[float]:
        if self.ratios is not None:
            return list(self.ratios)
        return [self.rho ** (s + 1) for s in range(len(self.stage_blocks))]

    def keep_counts(self, n_patches: int) -> list[int]:
        # the tiny offset absorbs rho**s round-off just below an integer
        return [max(1, math.floor(t * n_patches + 1e-9)) for t in self.targets]

    def validate(self, depth: int) -> None:
        if self.stage_blocks and self.stage_blocks[-1] >= depth:
            raise ValueError(f"stage block {self.stage_blocks[-1]} outside depth {depth}")


def topk_select(scores, m: int) -> np.ndarray:
    """Indices of the ``m`` highest scores, returned in ascending index order.

    Works on (n,) or (B, n). Ties go to the lower index.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[-1]
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in [1, {n}], got {m}")
    order = np.argsort(-s, axis=-1, kind="stable")[..., :m]
    return np.sort(order, axis=-1)


def prune_step(x: Tensor, pi, m: int, return_indices: bool = False):
    """Keep the class token plus the ``m`` patch tokens with highest keep probability.

    ``x`` is (B, n+1, C); ``pi`` is (B, n, 2) over patch tokens.
    """
    keep = np.asarray(getattr(pi, "data", pi))[..., 1]
    idx = topk_select(keep, m)
    tokens = gather_with_class(x, idx)
    return (tokens, idx) if return_indices else tokens


def gather_with_class(x: Tensor, patch_idx: np.ndarray) -> Tensor:
    b = x.shape[0]
    rows = np.concatenate([np.zeros((b, 1), dtype=np.int64), patch_idx + 1], axis=1)
    return T.gather_rows(x, rows)


def random_select(batch: int, n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform subsets of size ``m`` without replacement, one per sample."""
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in [1, {n}], got {m}")
    return np.sort(np.argsort(rng.random((batch, n)), axis=-1)[:, :m], axis=-1)


def attention_select(attn, m: int) -> np.ndarray:
    """Rank patch tokens by the class token's attention (B, H, n+1, n+1), head-averaged."""
    a = np.asarray(getattr(attn, "data", attn))
    return topk_select(a[:, :, 0, 1:].mean(axis=1), m)


def static_select(position_logits, positions: np.ndarray, m: int) -> np.ndarray:
    """Rank the current tokens by a learned, input-independent score of their original position."""
    scores = np.asarray(getattr(position_logits, "data", position_logits))[positions]
    return topk_select(scores, m)


def structural_pool(x: Tensor, positions: np.ndarray | None = None):
    """Merge each 2x2 neighbourhood of the patch grid by averaging; class token untouched.

    Returns the pooled tokens and the pooled (fractional) grid positions.
    """
    b, n1, c = x.shape
    n = n1 - 1
    side = math.isqrt(n)
    if side * side != n or side % 2:
        raise ValueError(f"structural pooling needs a square grid with even side, got {n} tokens")
    half = side // 2
    grid = T.reshape(x[:, 1:], (b, half, 2, half, 2, c))
    pooled = T.mul(T.tsum(T.tsum(grid, axis=4), axis=2), 0.25)
    pooled = T.reshape(pooled, (b, half * half, c))
    if positions is None:
        positions = np.broadcast_to(np.arange(n), (b, n))
    pos = np.asarray(positions, dtype=np.float64).reshape(b, half, 2, half, 2).mean(axis=(2, 4))
    return T.concat([x[:, :1], pooled], axis=1), pos.reshape(b, half * half)
