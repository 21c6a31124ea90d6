"""Analytic FLOPs accounting and wall-clock throughput measurement.

Counting convention: one fused multiply-add is one FLOP for every matrix
product (an (n, k) x (k, m) product costs n*k*m). LayerNorm, softmax and GELU
are charged 5, 5 and 8 FLOPs per element and kept as a separate line item.
"""

from __future__ import annotations

import csv
import io
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from dyntok import tensor as T
from dyntok import vit
from dyntok.pruning import PruneSchedule
from dyntok.vit import ViTConfig

SCHEMA_VERSION = 1
CONVENTION = "1 FLOP per multiply-accumulate in matmuls; LayerNorm 5, softmax 5, GELU 8 FLOPs per element"
LN_COST, SOFTMAX_COST, GELU_COST = 5, 5, 8


@dataclass
class FlopsReport:
    per_block: list[int]
    tokens_per_block: list[int]
    embed_head: int
    elementwise: int
    predictor_overhead: int
    total: int
    baseline_total: int
    reduction_pct: float
    backbone_total: int
    backbone_reduction_pct: float
    schema_version: int = SCHEMA_VERSION
    convention: str = CONVENTION

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    @property
    def backbone_gflops(self) -> float:
        return self.backbone_total / 1e9

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(gflops=self.gflops, backbone_gflops=self.backbone_gflops, baseline_gflops=self.baseline_total / 1e9)
        return d


def block_flops(n: int, config: ViTConfig) -> tuple[int, int]:
    """(matmul, elementwise) FLOPs of one block over ``n`` live tokens."""
    c, h = config.embed_dim, config.mlp_hidden
    matmul = 4 * n * c * c + 2 * n * n * c + 2 * n * c * h
    elementwise = 2 * LN_COST * n * c + SOFTMAX_COST * config.heads * n * n + GELU_COST * n * h
    return matmul, elementwise


def predictor_flops(n: int, config: ViTConfig) -> int:
    """One prediction module over ``n`` live patch tokens plus the class token."""
    c = config.embed_dim
    rows = n + 1
    matmul = 2 * rows * c * (c // 2) + rows * (c * (c // 2) + (c // 2) * (c // 4) + (c // 4) * 2)
    elementwise = 2 * LN_COST * rows * c + GELU_COST * rows * (2 * (c // 2) + c // 4) + SOFTMAX_COST * rows * 2
    return matmul + elementwise


def tokens_per_block(config: ViTConfig, schedule: PruneSchedule) -> list[int]:
    """Live tokens (class token included) entering each block."""
    n = config.num_patches
    if schedule.strategy == "structural":
        mid = config.depth // 2
        return [n + 1 if i < mid else n // 4 + 1 for i in range(config.depth)]
    counts = dict(zip(schedule.stage_blocks, schedule.keep_counts(n)))
    live, out = n, []
    for i in range(config.depth):
        live = min(live, counts.get(i, live))
        out.append(live + 1)
    return out


def _embed_head(config: ViTConfig, final_tokens: int) -> int:
    patch_dim = config.channels_in * config.patch_size**2
    return config.num_patches * patch_dim * config.embed_dim + config.embed_dim * config.num_classes + LN_COST * final_tokens * config.embed_dim


def _backbone(config: ViTConfig, tokens: list[int]) -> tuple[list[int], int, int]:
    per_block, ew_total = [], 0
    for n in tokens:
        mm, ew = block_flops(n, config)
        per_block.append(mm + ew)
        ew_total += ew
    return per_block, ew_total, sum(per_block) + _embed_head(config, tokens[-1])


def flops_vit(config: ViTConfig, schedule: PruneSchedule = PruneSchedule()) -> FlopsReport:
    """FLOPs of one image through the network under ``schedule``.

    ``total`` includes the prediction modules; ``backbone_total`` excludes them.
    ``baseline_total`` is the plain network with no sparsification.
    """
    schedule.validate(config.depth)
    tokens = tokens_per_block(config, schedule)
    per_block, elementwise, backbone = _backbone(config, tokens)
    _, _, baseline = _backbone(config, [config.num_patches + 1] * config.depth)
    overhead = 0
    if schedule.strategy == "prediction":
        overhead = sum(predictor_flops(tokens[b] - 1, config) for b in schedule.stage_blocks)
    total = backbone + overhead
    return FlopsReport(
        per_block=per_block,
        tokens_per_block=tokens,
        embed_head=_embed_head(config, tokens[-1]),
        elementwise=elementwise,
        predictor_overhead=overhead,
        total=total,
        baseline_total=baseline,
        reduction_pct=(1 - total / baseline) * 100,
        backbone_total=backbone,
        backbone_reduction_pct=(1 - backbone / baseline) * 100,
    )


def flops_for_counts(config: ViTConfig, stage_blocks, counts) -> int:
    """Backbone-plus-predictor FLOPs for explicit per-stage keep counts."""
    n = config.num_patches
    sched = PruneSchedule(stage_blocks, ratios=[c / n for c in counts])
    return flops_vit(config, sched).total


def equal_flops_ratio(config: ViTConfig, reference: PruneSchedule, block: int) -> float:
    """Keep ratio for a single stage at ``block`` whose FLOPs best match ``reference``."""
    target = flops_vit(config, reference).total
    n = config.num_patches
    best = min(range(1, n + 1), key=lambda m: abs(flops_vit(config, PruneSchedule((block,), ratios=[m / n])).total - target))
    return best / n


def width_scaling_table(embed_dims, rho: float, base: ViTConfig | None = None, stage_blocks=(3, 6, 9)) -> list[dict]:
    """GFLOPs with and without sparsification for several embedding widths (64-dim heads)."""
    base = base or vit.PRESETS["deit-s"]
    rows = []
    for d in embed_dims:
        cfg = replace(base, embed_dim=d, heads=max(1, d // 64))
        full = flops_vit(cfg).total
        pruned = flops_vit(cfg, PruneSchedule(stage_blocks, rho)).total if rho < 1 else full
        rows.append({"embed_dim": d, "heads": cfg.heads, "gflops": full / 1e9, "gflops_pruned": pruned / 1e9})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------- throughput


@dataclass
class BenchReport:
    batch_size: int
    images_per_second: float
    baseline_images_per_second: float
    speedup_pct: float
    wall_clock_stats: dict = field(default_factory=dict)
    baseline_wall_clock_stats: dict = field(default_factory=dict)
    workers: int = 1
    dtype: str = "float32"
    rho: float = 1.0
    flops_reduction_pct: float = 0.0
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


def worker_cap(requested: int | None = None) -> int:
    cap = int(os.environ.get("DYNTOK_THREADS", "0") or 0)
    n = requested or cap or 1
    return max(1, min(n, cap) if cap else n)


def _cast(params: dict, dtype) -> dict:
    return {k: T.Tensor(p.data.astype(dtype)) for k, p in params.items()}


def _run(params, config, schedule, images, pool, shards):
    def one(x):
        return vit.forward(x, params, config, schedule, mode="infer").logits

    if pool is None:
        return one(images)
    return list(pool.map(one, np.array_split(images, shards)))


def throughput_bench(
    params,
    config: ViTConfig,
    schedule: PruneSchedule,
    batch_size: int = 32,
    iterations: int = 30,
    warmup: int = 5,
    workers: int | None = None,
    dtype: str = "float32",
    groups: int = 5,
    seed: int = 0,
) -> BenchReport:
    """Images/second of gathered inference under ``schedule`` versus the unpruned network.

    Pruned and unpruned batches are interleaved on the same inputs; the rate is
    the median over ``groups`` of per-group mean batch times.
    """
    if warmup < 3:
        raise ValueError("warmup must be at least 3 iterations")
    if iterations < 10:
        raise ValueError("need at least 10 timed iterations")
    workers = worker_cap(workers)
    p = _cast(params, np.dtype(dtype))
    images = np.random.default_rng(seed).standard_normal(
        (batch_size, config.channels_in, config.image_size, config.image_size)
    ).astype(dtype)
    plain = PruneSchedule()
    times = {"pruned": [], "plain": []}
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        with T.no_grad(), threadpool_limits(1):
            for _ in range(warmup):
                _run(p, config, schedule, images, pool, workers)
                _run(p, config, plain, images, pool, workers)
            for _ in range(iterations):
                for name, sched in (("pruned", schedule), ("plain", plain)):
                    t0 = time.perf_counter()
                    _run(p, config, sched, images, pool, workers)
                    times[name].append(time.perf_counter() - t0)
    finally:
        if pool is not None:
            pool.shutdown()

    def rate(ts):
        chunks = np.array_split(np.asarray(ts), groups)
        return batch_size / statistics.median(float(c.mean()) for c in chunks)

    def stats(ts):
        return {"mean": float(np.mean(ts)), "std": float(np.std(ts, ddof=1)), "iterations": len(ts)}

    ips, base_ips = rate(times["pruned"]), rate(times["plain"])
    return BenchReport(
        batch_size=batch_size,
        images_per_second=ips,
        baseline_images_per_second=base_ips,
        speedup_pct=(ips / base_ips - 1) * 100,
        wall_clock_stats=stats(times["pruned"]),
        baseline_wall_clock_stats=stats(times["plain"]),
        workers=workers,
        dtype=str(np.dtype(dtype)),
        rho=schedule.rho,
        flops_reduction_pct=flops_vit(config, schedule).reduction_pct,
    )
