"""Session fixtures shared by the acceptance and slow property tests.

Set DYNTOK_ACCEPTANCE_CACHE to a directory to keep the desk teacher, the sweep
results and the seed-0 student between runs.
"""

import json
import os
from pathlib import Path

import helpers
import pytest

from dyntok import cli, complexity, train, vit

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"
SEEDS = (0, 1, 2)


def pytest_terminal_summary(terminalreporter):
    if not helpers.ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(helpers.ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory) -> Path:
    env = os.environ.get("DYNTOK_ACCEPTANCE_CACHE")
    path = Path(env) if env else tmp_path_factory.mktemp("acceptance")
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def desk():
    tcfg, vcfg, dopts = cli.load_config(DESK_CONFIG)
    tr, va = cli.load_data(None, dopts, vcfg)
    return tcfg, vcfg, tr, va


@pytest.fixture(scope="session")
def teacher(desk, cache_dir):
    tcfg, vcfg, tr, va = desk
    ckpt = cache_dir / "teacher"
    if (ckpt / "manifest.json").exists():
        return vit.load_checkpoint(ckpt)[0]
    params, _ = train.pretrain_teacher(vcfg, tr, tcfg)
    vit.save_checkpoint(ckpt, params, vcfg)
    return params


def _single_stage(tcfg: train.TrainConfig, vcfg) -> train.TrainConfig:
    """One stage at the middle stage block, keep ratio matched to the three-stage FLOPs."""
    block = tcfg.stage_blocks[len(tcfg.stage_blocks) // 2]
    r = complexity.equal_flops_ratio(vcfg, tcfg.schedule(), block)
    return train.TrainConfig.from_dict({**tcfg.to_dict(), "stage_blocks": (block,), "rho": r})


@pytest.fixture(scope="session")
def sweep(desk, teacher, cache_dir):
    """Per-seed ratios and accuracies of three-stage and single-stage students, plus the seed-0 student."""
    tcfg, vcfg, tr, va = desk
    results_path, student_path = cache_dir / "sweep.json", cache_dir / "student_seed0"
    if results_path.exists() and (student_path / "manifest.json").exists():
        return json.loads(results_path.read_text()), vit.load_checkpoint(student_path)[0]
    rows, student = [], None
    for seed in SEEDS:
        cfg3 = train.TrainConfig.from_dict({**tcfg.to_dict(), "seed": seed})
        res3 = train.train_dynamic(teacher, vcfg, tr, cfg3)
        cfg1 = _single_stage(cfg3, vcfg)
        res1 = train.train_dynamic(teacher, vcfg, tr, cfg1)
        rows.append(
            {
                "seed": seed,
                "ratios": res3.final_ratios,
                "history": res3.history,
                "prediction": train.evaluate(res3.params, vcfg, cfg3.schedule("prediction"), va)["top1"],
                "random": train.evaluate(res3.params, vcfg, cfg3.schedule("random"), va)["top1"],
                "single_stage": train.evaluate(res1.params, vcfg, cfg1.schedule(), va)["top1"],
                "single_stage_rho": cfg1.rho,
                "single_stage_ratios": res1.final_ratios,
            }
        )
        if seed == SEEDS[0]:
            student = res3.params
            vit.save_checkpoint(student_path, student, vcfg)
    results_path.write_text(json.dumps(rows, indent=1))
    return rows, student
