"""Small pre-norm vision transformer with optional hierarchical token sparsification."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dyntok import pruning
from dyntok import tensor as T
from dyntok.attention import masked_attention
from dyntok.predictor import _trunc_normal, gumbel_sample, init_predictor, predict_probs, update_mask
from dyntok.pruning import PruneSchedule
from dyntok.tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels_in: int = 1
    embed_dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 10

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @classmethod
    def from_dict(cls, d: dict) -> ViTConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


PRESETS = {
    "desk": ViTConfig(),
    "deit-ti": ViTConfig(image_size=224, patch_size=16, channels_in=3, embed_dim=192, depth=12, heads=3, num_classes=1000),
    "deit-s": ViTConfig(image_size=224, patch_size=16, channels_in=3, embed_dim=384, depth=12, heads=6, num_classes=1000),
    "deit-b": ViTConfig(image_size=224, patch_size=16, channels_in=3, embed_dim=768, depth=12, heads=12, num_classes=1000),
}


def init_vit(config: ViTConfig, seed: int = 0, stages: int = 0) -> dict[str, Tensor]:
    """Backbone parameters plus ``stages`` predictor modules and static position scores.

    Weights are truncated normal (std 0.02), biases zero, LayerNorm gains one.
    """
    rng = np.random.default_rng(seed)
    c, h = config.embed_dim, config.mlp_hidden
    patch_dim = config.channels_in * config.patch_size**2
    raw: dict[str, np.ndarray] = {
        "patch.w": _trunc_normal(rng, (patch_dim, c)),
        "patch.b": np.zeros(c),
        "cls": _trunc_normal(rng, (1, 1, c)),
        "pos": _trunc_normal(rng, (1, config.num_patches + 1, c)),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        raw[p + "ln1_g"], raw[p + "ln1_b"] = np.ones(c), np.zeros(c)
        for name in ("q", "k", "v", "o"):
            raw[p + "w" + name] = _trunc_normal(rng, (c, c))
            raw[p + "b" + name] = np.zeros(c)
        raw[p + "ln2_g"], raw[p + "ln2_b"] = np.ones(c), np.zeros(c)
        raw[p + "fc1_w"], raw[p + "fc1_b"] = _trunc_normal(rng, (c, h)), np.zeros(h)
        raw[p + "fc2_w"], raw[p + "fc2_b"] = _trunc_normal(rng, (h, c)), np.zeros(c)
    raw["norm_g"], raw["norm_b"] = np.ones(c), np.zeros(c)
    raw["head.w"], raw["head.b"] = _trunc_normal(rng, (c, config.num_classes)), np.zeros(config.num_classes)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
    add_stages(params, config, stages, seed)
    return params


def add_stages(params: dict[str, Tensor], config: ViTConfig, stages: int, seed: int = 0) -> None:
    """Attach fresh predictor and static-score parameters for any missing stage."""
    rng = np.random.default_rng(seed + 7919)
    for s in range(stages):
        if f"pred.{s}.head.w3" not in params:
            params.update(init_predictor(config.embed_dim, rng, prefix=f"pred.{s}."))
        if f"static.{s}" not in params:
            params[f"static.{s}"] = Tensor(np.zeros(config.num_patches), requires_grad=True, name=f"static.{s}")


def is_backbone(name: str) -> bool:
    return not name.startswith(("pred.", "static."))


def patchify(images: np.ndarray, config: ViTConfig) -> np.ndarray:
    b, ch, hgt, wid = images.shape
    if hgt != config.image_size or wid != config.image_size or ch != config.channels_in:
        raise T.ShapeError(
            f"images {images.shape[1:]} do not match config ({config.channels_in}, {config.image_size}, {config.image_size})"
        )
    g, p = config.grid, config.patch_size
    x = images.reshape(b, ch, g, p, g, p).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, g * g, p * p * ch)


def patch_embed(images: np.ndarray, params: dict[str, Tensor], config: ViTConfig) -> Tensor:
    """Linear patch projection, class token prepended, positional embeddings added."""
    images = np.asarray(images)
    patches = patchify(images, config).astype(params["patch.w"].dtype, copy=False)
    tokens = T.linear(Tensor(patches), params["patch.w"], params["patch.b"])
    cls = T.mul(params["cls"], np.ones((images.shape[0], 1, 1), dtype=tokens.dtype))
    return T.add(T.concat([cls, tokens], axis=1), params["pos"])


def block_params(params: dict[str, Tensor], i: int) -> dict[str, Tensor]:
    p = f"blocks.{i}."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def block_forward(x: Tensor, bp: dict[str, Tensor], heads: int, mask: Tensor | None = None, return_attn: bool = False):
    """Pre-norm transformer block; ``mask`` (B, n) switches attention to masked mode."""
    h = T.layer_norm(x, bp["ln1_g"], bp["ln1_b"])
    a = masked_attention(h, bp, heads, mask, return_attn=return_attn)
    if return_attn:
        a, attn = a
    x = T.add(x, a)
    h = T.layer_norm(x, bp["ln2_g"], bp["ln2_b"])
    h = T.linear(T.gelu(T.linear(h, bp["fc1_w"], bp["fc1_b"])), bp["fc2_w"], bp["fc2_b"])
    x = T.add(x, h)
    return (x, attn) if return_attn else x


def stage_params(params: dict[str, Tensor], s: int) -> dict[str, Tensor]:
    p = f"pred.{s}."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def static_probs(params: dict[str, Tensor], s: int, batch: int, positions: np.ndarray | None = None) -> Tensor:
    """Input-independent keep probabilities from per-position logits: softmax([0, l])."""
    logits = params[f"static.{s}"]
    if positions is not None:
        logits = logits[positions]
    else:
        logits = T.reshape(logits, (1,) + logits.shape)
    col = T.reshape(logits, logits.shape + (1,))
    two = T.concat([np.zeros(col.shape, dtype=col.dtype), col], axis=-1)
    probs = T.softmax_rows(two)
    if probs.shape[0] != batch:
        probs = T.mul(probs, np.ones((batch, 1, 1), dtype=probs.dtype))
    return probs


@dataclass
class ForwardOutput:
    logits: Tensor
    final_tokens: Tensor
    masks: list = field(default_factory=list)
    probs: list = field(default_factory=list)
    positions: list = field(default_factory=list)


def forward(
    images,
    params: dict[str, Tensor],
    config: ViTConfig,
    schedule: PruneSchedule = PruneSchedule(),
    mode: str = "train",
    rng: np.random.Generator | None = None,
    decision: str = "gumbel",
    temperature: float = 1.0,
    gumbel_noise: list | None = None,
) -> ForwardOutput:
    """Run the network.

    ``mode="train"`` keeps every token and masks attention; stage decisions come
    from straight-through Gumbel sampling (``decision="gumbel"``) or from the
    deterministic top-k rule used at inference (``decision="topk"``).
    ``mode="infer"`` physically gathers the surviving tokens at each stage.

    ``masks`` holds the full-length (B, N+1) decision masks in original token
    order; ``probs`` the per-stage keep probabilities over patch tokens;
    ``positions`` (infer mode) the original patch index of each survivor.
    """
    schedule.validate(config.depth)
    if mode == "train":
        return _forward_masked(images, params, config, schedule, rng, decision, temperature, gumbel_noise)
    if mode == "infer":
        return _forward_gathered(images, params, config, schedule, rng)
    raise ValueError(f"unknown mode {mode!r}")


def _head(x: Tensor, params: dict[str, Tensor]):
    x = T.layer_norm(x, params["norm_g"], params["norm_b"])
    return T.linear(x[:, 0], params["head.w"], params["head.b"]), x


def _forward_masked(images, params, config, schedule, rng, decision, temperature, gumbel_noise) -> ForwardOutput:
    x = patch_embed(images, params, config)
    b = x.shape[0]
    n = config.num_patches
    counts = schedule.keep_counts(n)
    stage_of = {blk: s for s, blk in enumerate(schedule.stage_blocks)}
    mask: Tensor | None = None
    out = ForwardOutput(logits=None, final_tokens=None)
    for i in range(config.depth):
        s = stage_of.get(i)
        if s is not None:
            full = mask if mask is not None else Tensor(np.ones((b, n + 1), dtype=x.dtype))
            if schedule.strategy == "static":
                pi = static_probs(params, s, b)
            else:
                pi = predict_probs(x, full, stage_params(params, s))[:, 1:]
            if decision == "gumbel":
                noise = gumbel_noise[s] if gumbel_noise is not None else None
                d = gumbel_sample(pi, temperature, rng, noise=noise)
            elif decision == "topk":
                scores = np.where(full.data[:, 1:] > 0, pi.data[..., 1], -np.inf)
                idx = pruning.topk_select(scores, counts[s])
                d = np.zeros((b, n), dtype=x.dtype)
                np.put_along_axis(d, idx, 1.0, axis=1)
                d = Tensor(d)
            else:
                raise ValueError(f"unknown decision rule {decision!r}")
            new = T.concat([np.ones((b, 1), dtype=x.dtype), d], axis=1)
            mask = update_mask(full, new)
            out.masks.append(mask)
            out.probs.append(pi)
        x = block_forward(x, block_params(params, i), config.heads, mask)
    out.logits, out.final_tokens = _head(x, params)
    return out


def _forward_gathered(images, params, config, schedule, rng) -> ForwardOutput:
    x = patch_embed(images, params, config)
    b = x.shape[0]
    n = config.num_patches
    counts = schedule.keep_counts(n)
    stage_of = {blk: s for s, blk in enumerate(schedule.stage_blocks)}
    positions = np.broadcast_to(np.arange(n), (b, n))
    strategy = schedule.strategy
    if strategy == "random" and rng is None:
        rng = np.random.default_rng(schedule.seed)
    pool_at = config.depth // 2 if strategy == "structural" else None
    out = ForwardOutput(logits=None, final_tokens=None)
    attn = None
    for i in range(config.depth):
        s = stage_of.get(i) if strategy != "structural" else None
        if i == pool_at:
            x, positions = pruning.structural_pool(x, positions)
            out.positions.append(positions)
        if s is not None:
            m = min(counts[s], x.shape[1] - 1)
            pi = None
            if m == x.shape[1] - 1:
                # keeping everything: selection is the identity
                idx = np.broadcast_to(np.arange(m), (b, m))
            elif strategy == "prediction":
                live = Tensor(np.ones(x.shape[:2], dtype=x.dtype))
                pi = predict_probs(x, live, stage_params(params, s))[:, 1:]
                idx = pruning.topk_select(pi.data[..., 1], m)
            elif strategy == "random":
                idx = pruning.random_select(b, x.shape[1] - 1, m, rng)
            elif strategy == "attention_score":
                idx = pruning.attention_select(attn, m)
            elif strategy == "static":
                idx = pruning.static_select(params[f"static.{s}"], positions, m)
            if m < x.shape[1] - 1:
                x = pruning.gather_with_class(x, idx)
                positions = np.take_along_axis(positions, idx, axis=1)
            full = np.zeros((b, n + 1))
            full[:, 0] = 1.0
            np.put_along_axis(full, positions + 1, 1.0, axis=1)
            out.masks.append(Tensor(full))
            out.positions.append(positions)
            if pi is not None:
                out.probs.append(pi)
        want_attn = strategy == "attention_score" and (i + 1) in stage_of
        if want_attn:
            x, attn = block_forward(x, block_params(params, i), config.heads, return_attn=True)
        else:
            x = block_forward(x, block_params(params, i), config.heads)
    out.logits, out.final_tokens = _head(x, params)
    return out


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def snap_to_float32(params: dict[str, Tensor]) -> None:
    """Round parameters to the float32 grid so a checkpoint round-trip is exact."""
    for t in params.values():
        t.data = t.data.astype(np.float32).astype(t.data.dtype)


def save_checkpoint(path, params: dict[str, Tensor], config: ViTConfig, meta: dict | None = None) -> Path:
    """Write ``manifest.json`` plus ``weights.bin`` (little-endian float32) into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / "weights.bin", "wb") as fh:
        for name in sorted(params):
            blob = np.ascontiguousarray(params[name].data, dtype="<f4").tobytes()
            fh.write(blob)
            entries.append({"name": name, "shape": list(params[name].shape), "dtype": "float32", "offset": offset, "nbytes": len(blob)})
            offset += len(blob)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "byte_order": "little",
        "blob": "weights.bin",
        "config": asdict(config),
        "meta": meta or {},
        "tensors": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path, dtype=np.float64) -> tuple[dict[str, Tensor], ViTConfig, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    raw = (path / manifest.get("blob", "weights.bin")).read_bytes()
    params = {}
    for e in manifest["tensors"]:
        if e["offset"] + e["nbytes"] > len(raw):
            raise ValueError(f"checkpoint blob truncated at tensor {e['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        params[e["name"]] = Tensor(arr.reshape(e["shape"]).astype(dtype), requires_grad=True, name=e["name"])
    return params, ViTConfig.from_dict(manifest["config"]), manifest.get("meta", {})
