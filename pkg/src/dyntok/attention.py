"""Multi-head self-attention with decision-mask renormalization.

A dropped token j is removed from every other row of the attention matrix by
weighting ``exp(P_ij)`` with ``G_ij`` and renormalizing. The diagonal of ``G``
is pinned to 1, so each row keeps at least one live entry. A dropped token
sends nothing to any other row; its own row still reads from the kept tokens
but is never used downstream. Kept rows are therefore identical to attention over
the gathered kept subsequence, while the tensor shape never changes.
"""

from __future__ import annotations

import numpy as np

from dyntok import tensor as T
from dyntok.tensor import Tensor

# exp() argument cap, relative to the live row max. It only touches entries
# outside the live set: their forward weight is 0, but exp(p - rowmax) is the
# gradient with respect to the mask. At 0 that gradient is bounded by the largest
# live weight, so a dropped token scoring far above the kept ones cannot blow up
# the predictor step. Set to np.inf for the exact derivative.
MASK_GRAD_CAP = 0.0


def build_graph_mask(mask: Tensor) -> Tensor:
    """(B, n) keep mask -> (B, n, n) graph with self-loops: G_ij = 1 if i == j else D_j."""
    mask = T.as_tensor(mask)
    n = mask.shape[-1]
    eye = np.eye(n, dtype=mask.dtype)
    cols = T.reshape(mask, (mask.shape[0], 1, n))
    return T.add(T.mul(cols, 1.0 - eye), eye)


def masked_softmax(scores: Tensor, graph: Tensor) -> Tensor:
    """Row softmax of ``scores`` (B, H, n, n) weighted by ``graph`` (B, 1, n, n).

    The row max is taken over live entries only (graph > 0), so the live part of
    each row never underflows.
    """
    p = scores.data
    gd = graph.data
    live = gd > 0
    row_max = np.where(live, p, -np.inf).max(axis=-1, keepdims=True)
    e = np.exp(np.minimum(p - row_max, MASK_GRAD_CAP))
    w = e * gd
    denom = w.sum(axis=-1, keepdims=True)
    y = w / denom

    def grads(g):
        inner = g - (g * y).sum(axis=-1, keepdims=True)
        d_scores = y * inner if scores.requires_grad else None
        d_graph = None
        if graph.requires_grad:
            d_graph = (e / denom) * inner
        return d_scores, d_graph

    return T.custom_op(y, (scores, graph), grads)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, c = t.shape
    return T.transpose(T.reshape(t, (b, n, heads, c // heads)), (0, 2, 1, 3))


def masked_attention(
    x: Tensor,
    params: dict[str, Tensor],
    heads: int,
    mask: Tensor | None = None,
    return_attn: bool = False,
):
    """Self-attention over ``x`` (B, n, C).

    ``params`` holds ``wq, wk, wv, wo`` of shape (C, C) and matching biases
    ``bq, bk, bv, bo``. With ``mask`` (B, n) the rows are renormalized over the
    kept tokens; without it this is plain softmax attention.
    """
    b, n, c = x.shape
    if c % heads:
        raise T.ShapeError(f"embed dim {c} not divisible by {heads} heads")
    q = _split_heads(T.linear(x, params["wq"], params.get("bq")), heads)
    k = _split_heads(T.linear(x, params["wk"], params.get("bk")), heads)
    v = _split_heads(T.linear(x, params["wv"], params.get("bv")), heads)
    scores = T.mul(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(c // heads))
    if mask is None:
        attn = T.softmax_rows(scores)
    else:
        if mask.shape != (b, n):
            raise T.ShapeError(f"mask shape {mask.shape} does not match tokens {(b, n)}")
        graph = T.reshape(build_graph_mask(mask), (b, 1, n, n))
        attn = masked_softmax(scores, graph)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, c))
    out = T.linear(out, params["wo"], params.get("bo"))
    if return_attn:
        return out, attn
    return out
