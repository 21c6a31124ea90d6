import json

import numpy as np
import pytest

from dyntok import complexity
from dyntok.pruning import PruneSchedule
from dyntok.vit import PRESETS, ViTConfig, init_vit
from helpers import tiny_config


def enumerate_block_macs(n, c, hidden):
    """Matrix products of one block listed one by one as (rows, inner, cols)."""
    products = [(n, c, c)] * 3 + [(n, c, n), (n, n, c), (n, c, c), (n, c, hidden), (n, hidden, c)]
    return sum(a * b * d for a, b, d in products)


@pytest.mark.parametrize("n", [1, 17, 197])
def test_block_matmul_flops_enumeration(n):
    cfg = PRESETS["deit-s"]
    mm, _ = complexity.block_flops(n, cfg)
    assert mm == enumerate_block_macs(n, cfg.embed_dim, cfg.mlp_hidden)


def test_deit_s_baseline_near_4_6_gflops():
    rep = complexity.flops_vit(PRESETS["deit-s"])
    assert rep.predictor_overhead == 0
    assert abs(rep.gflops - 4.6) / 4.6 < 0.02
    assert rep.tokens_per_block == [197] * 12


def test_tokens_per_block_follow_schedule():
    sched = PruneSchedule((3, 6, 9), 0.7)
    toks = complexity.tokens_per_block(PRESETS["deit-s"], sched)
    assert toks == [197] * 3 + [138] * 3 + [97] * 3 + [68] * 3


def test_structural_tokens():
    toks = complexity.tokens_per_block(PRESETS["deit-s"], PruneSchedule(strategy="structural"))
    assert toks == [197] * 6 + [50] * 6


def test_pruning_monotone_in_rho():
    cfg = PRESETS["deit-s"]
    vals = [complexity.flops_vit(cfg, PruneSchedule((3, 6, 9), r)).total for r in (0.9, 0.8, 0.7, 0.6)]
    assert vals == sorted(vals, reverse=True)


def test_report_json_schema():
    d = complexity.flops_vit(PRESETS["desk"], PruneSchedule((2, 3, 4), 0.7)).to_dict()
    json.dumps(d)
    for key in ("per_block", "total", "baseline_total", "reduction_pct", "predictor_overhead", "schema_version", "convention"):
        assert key in d
    assert d["total"] == d["backbone_total"] + d["predictor_overhead"]


def test_equal_flops_single_stage_matches_reference():
    cfg = PRESETS["desk"]
    ref = complexity.flops_vit(cfg, PruneSchedule((2, 3, 4), 0.7)).total
    r = complexity.equal_flops_ratio(cfg, PruneSchedule((2, 3, 4), 0.7), 3)
    got = complexity.flops_vit(cfg, PruneSchedule((3,), ratios=[r])).total
    step = complexity.block_flops(2, cfg)[0] * 3
    assert abs(got - ref) <= step


def test_width_scaling_table():
    rows = complexity.width_scaling_table([192, 384, 768], 0.7)
    assert [r["heads"] for r in rows] == [3, 6, 12]
    assert all(r["gflops_pruned"] < r["gflops"] for r in rows)
    assert rows[1]["gflops"] == pytest.approx(complexity.flops_vit(PRESETS["deit-s"]).gflops)
    csv = complexity.rows_to_csv(rows)
    assert csv.splitlines()[0] == "embed_dim,heads,gflops,gflops_pruned"


def test_bench_argument_checks():
    cfg = tiny_config()
    params = init_vit(cfg, 0)
    with pytest.raises(ValueError):
        complexity.throughput_bench(params, cfg, PruneSchedule(), warmup=2)
    with pytest.raises(ValueError):
        complexity.throughput_bench(params, cfg, PruneSchedule(), iterations=5)


def test_bench_report_fields():
    cfg = tiny_config()
    params = init_vit(cfg, 0, stages=2)
    rep = complexity.throughput_bench(params, cfg, PruneSchedule((1, 2), 0.5), batch_size=4, iterations=10, warmup=3)
    d = rep.to_dict()
    assert d["images_per_second"] > 0 and d["baseline_images_per_second"] > 0
    assert d["wall_clock_stats"]["iterations"] == 10
    assert d["flops_reduction_pct"] > 0


def test_worker_cap_env(monkeypatch):
    monkeypatch.setenv("DYNTOK_THREADS", "2")
    assert complexity.worker_cap(8) == 2
    assert complexity.worker_cap() == 2
    monkeypatch.delenv("DYNTOK_THREADS")
    assert complexity.worker_cap(3) == 3
    assert complexity.worker_cap() == 1
