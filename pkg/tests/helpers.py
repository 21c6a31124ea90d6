"""Shared test utilities: central finite differences and a random-projection scalarizer."""

from __future__ import annotations

import numpy as np

from dyntok import tensor as T

# one "criterion N: PASS|FAIL ..." line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []

H = 1e-5
GRAD_RTOL = 1e-4
# below this gradient norm the check falls back to an absolute comparison
NORM_FLOOR = 1e-6


def project(out: T.Tensor, seed: int = 0) -> T.Tensor:
    """Scalar <out, W> with a fixed random W, so every output entry gets a distinct weight."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tsum(T.mul(out, w))


def numeric_grad(f, x: T.Tensor, h: float = H) -> np.ndarray:
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), NORM_FLOOR))


def grad_errors(f, inputs: list[T.Tensor], h: float = H) -> list[float]:
    """Relative error between backprop and central differences for each input."""
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    T.backward(f())
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    return [rel_err(a, numeric_grad(f, x, h)) for a, x in zip(analytic, inputs)]


def assert_grads(f, inputs: list[T.Tensor], rtol: float = GRAD_RTOL) -> None:
    errs = grad_errors(f, inputs)
    assert max(errs) < rtol, f"gradient relative errors {errs}"


def tiny_config(**kw):
    from dyntok.vit import ViTConfig

    base = dict(image_size=16, patch_size=4, channels_in=1, embed_dim=16, depth=4, heads=2, mlp_ratio=2.0, num_classes=3)
    base.update(kw)
    return ViTConfig(**base)


def attention_params(c: int, rng: np.random.Generator) -> dict:
    p = {}
    for name in ("q", "k", "v", "o"):
        p["w" + name] = T.Tensor(rng.standard_normal((c, c)) / np.sqrt(c))
        p["b" + name] = T.Tensor(0.1 * rng.standard_normal(c))
    return p


def reference_attention(x: np.ndarray, p: dict, heads: int) -> np.ndarray:
    """Plain numpy multi-head attention over every row of ``x`` (n, C): the gather oracle."""
    n, c = x.shape
    d = c // heads

    def proj(name):
        return (x @ p["w" + name].data + p["b" + name].data).reshape(n, heads, d).transpose(1, 0, 2)

    q, k, v = proj("q"), proj("k"), proj("v")
    s = q @ k.transpose(0, 2, 1) / np.sqrt(d)
    s = np.exp(s - s.max(-1, keepdims=True))
    a = s / s.sum(-1, keepdims=True)
    out = (a @ v).transpose(1, 0, 2).reshape(n, c)
    return out @ p["wo"].data + p["bo"].data


def random_attention_instance(rng: np.random.Generator):
    """Random (x, mask, params, heads) with B<=4, N<=16, C<=32 and at least one kept token."""
    b = int(rng.integers(1, 5))
    n = int(rng.integers(2, 17))
    heads = int(rng.choice([1, 2, 4]))
    c = heads * int(rng.integers(1, 32 // heads + 1))
    x = rng.standard_normal((b, n, c))
    mask = (rng.random((b, n)) < rng.uniform(0.2, 0.9)).astype(float)
    mask[:, 0] = 1.0
    return x, mask, attention_params(c, rng), heads


def record(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line
