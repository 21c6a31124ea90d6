"""Command-line entry point: ``dyntok <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from dyntok import complexity, data, report, train, vit
from dyntok.pruning import STRATEGIES, PruneSchedule
from dyntok.vit import PRESETS, ViTConfig

log = logging.getLogger("dyntok")

DATA_KEYS = {"classes": 10, "per_class": 100, "val_per_class": 50, "data_seed": 0}
DEFAULT_STAGES = {"desk": (2, 3, 4), "deit-ti": (3, 6, 9), "deit-s": (3, 6, 9), "deit-b": (3, 6, 9)}
STRATEGY_ALIASES = {"attention": "attention_score"}


def load_config(path) -> tuple[train.TrainConfig, ViTConfig, dict]:
    """Split a flat JSON config into training, architecture and dataset options."""
    raw = json.loads(Path(path).read_text()) if path else {}
    tkeys = {f.name for f in fields(train.TrainConfig)}
    vkeys = {f.name for f in fields(ViTConfig)}
    unknown = set(raw) - tkeys - vkeys - set(DATA_KEYS) - {"arch"}
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    base = PRESETS[raw.get("arch", "desk")]
    vcfg = ViTConfig.from_dict({**base.__dict__, **{k: v for k, v in raw.items() if k in vkeys}})
    tcfg = train.TrainConfig.from_dict({k: v for k, v in raw.items() if k in tkeys})
    dopts = {k: raw.get(k, v) for k, v in DATA_KEYS.items()}
    return tcfg, vcfg, dopts


def load_data(source, dopts: dict, vcfg: ViTConfig, num_classes: int | None = None) -> tuple[data.Dataset, data.Dataset]:
    """Train/val splits from an IDX directory, or synthetic data when ``source`` is None or 'synth'."""
    if source in (None, "synth"):
        return data.synth_splits(
            dopts["classes"],
            dopts["per_class"],
            dopts["val_per_class"],
            seed=dopts["data_seed"],
            image_size=vcfg.image_size,
            patch=vcfg.patch_size,
        )
    tr = data.load_dir(source, "train", num_classes)
    va = data.load_dir(source, "val", tr.num_classes).with_stats_of(tr)
    return tr, va


def _arch(name: str) -> ViTConfig:
    if name in PRESETS:
        return PRESETS[name]
    return ViTConfig.from_dict(json.loads(Path(name).read_text()))


def _stages(text: str | None, default) -> tuple[int, ...]:
    if text:
        return tuple(int(s) for s in text.split(","))
    return tuple(default)


def _norm(ds: data.Dataset) -> dict:
    return {"mean": [float(v) for v in ds.mean], "std": [float(v) for v in ds.std]}


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _ckpt_schedule(meta: dict, rho: float | None, strategy: str = "prediction", stages: str | None = None) -> PruneSchedule:
    stage_blocks = _stages(stages, meta.get("stage_blocks", ()))
    # explicit per-stage ratios only apply when the stored rho is used
    ratios = meta.get("ratios") if rho is None and not stages else None
    return PruneSchedule(stage_blocks, rho if rho is not None else meta.get("rho", 1.0), strategy, ratios)


# ---------------------------------------------------------------- subcommands


def cmd_make_data(args) -> None:
    tr, va = data.synth_splits(args.classes, args.per_class, args.val_per_class, seed=args.seed)
    data.save_dir(args.out, tr, va)
    _emit({"out": str(args.out), "train": len(tr), "val": len(va)})


def cmd_pretrain(args) -> None:
    tcfg, vcfg, dopts = load_config(args.config)
    tr, va = load_data(args.data, dopts, vcfg)
    vcfg = ViTConfig.from_dict({**vcfg.__dict__, "num_classes": tr.num_classes, "image_size": tr.images.shape[-1], "channels_in": tr.images.shape[1]})
    params, history = train.pretrain_teacher(vcfg, tr, tcfg)
    acc = train.evaluate(params, vcfg, PruneSchedule(), va)["top1"]
    vit.save_checkpoint(args.out, params, vcfg, {"role": "teacher", "val_top1": acc, "history": history, "data": args.data or "synth", "data_opts": dopts, "normalization": _norm(tr)})
    _emit({"out": str(args.out), "val_top1": acc, "epochs": len(history)})


def cmd_train(args) -> None:
    tcfg, _, dopts = load_config(args.config)
    teacher, vcfg, tmeta = vit.load_checkpoint(args.teacher)
    if args.rho is not None:
        tcfg.rho = args.rho
    if args.stages:
        tcfg.stage_blocks = _stages(args.stages, ())
    data_source = args.data or tmeta.get("data", "synth")
    tr, va = load_data(data_source, tmeta.get("data_opts", dopts) if args.data is None else dopts, vcfg, vcfg.num_classes)
    result = train.train_dynamic(teacher, vcfg, tr, tcfg)
    sched = tcfg.schedule()
    ev = train.evaluate(result.params, vcfg, sched, va)
    meta = {
        "role": "student",
        "rho": tcfg.rho,
        "stage_blocks": list(tcfg.stage_blocks),
        "ratios": list(tcfg.ratios) if tcfg.ratios else None,
        "train_config": tcfg.to_dict(),
        "history": result.history,
        "val_top1": ev["top1"],
        "data": data_source,
        "data_opts": tmeta.get("data_opts", dopts),
        "normalization": _norm(tr),
    }
    out = vit.save_checkpoint(args.out, result.params, vcfg, meta)
    report.plot_history(result.history, sched.targets, out / "history.png")
    _emit({"out": str(out), "val_top1": ev["top1"], "final_ratios": result.final_ratios, "targets": sched.targets})


def cmd_eval(args) -> None:
    params, vcfg, meta = vit.load_checkpoint(args.ckpt)
    strategy = STRATEGY_ALIASES.get(args.strategy, args.strategy)
    sched = _ckpt_schedule(meta, args.rho, strategy, args.stages)
    vit.add_stages(params, vcfg, len(sched.stage_blocks))
    _, va = load_data(args.data or meta.get("data", "synth"), {**DATA_KEYS, **meta.get("data_opts", {})}, vcfg, vcfg.num_classes)
    res = train.evaluate(params, vcfg, sched, va, threads=complexity.worker_cap())
    res["flops"] = complexity.flops_vit(vcfg, sched).to_dict()
    _emit(res)


def cmd_flops(args) -> None:
    cfg = _arch(args.arch)
    stages = _stages(args.stages, DEFAULT_STAGES.get(args.arch, (3, 6, 9)))
    sched = PruneSchedule(stages if args.rho < 1 else (), args.rho, args.strategy)
    rep = complexity.flops_vit(cfg, sched)
    out = rep.to_dict()
    if args.width_dims:
        dims = [int(d) for d in args.width_dims.split(",")]
        rows = complexity.width_scaling_table(dims, args.rho, cfg, stages)
        out["width_scaling"] = rows
        if args.csv:
            Path(args.csv).write_text(complexity.rows_to_csv(rows))
            report.plot_width_scaling(rows, Path(args.csv).with_suffix(".png"))
    elif args.csv:
        rows = [{"block": i, "tokens": t, "flops": f} for i, (t, f) in enumerate(zip(rep.tokens_per_block, rep.per_block))]
        Path(args.csv).write_text(complexity.rows_to_csv(rows))
    _emit(out)


def cmd_bench(args) -> None:
    params, vcfg, meta = vit.load_checkpoint(args.ckpt)
    sched = _ckpt_schedule(meta, args.rho)
    if sched.rho >= 1:
        sched = PruneSchedule(sched.stage_blocks, 1.0)
    rep = complexity.throughput_bench(params, vcfg, sched, args.batch, args.iters, args.warmup, args.workers, args.dtype)
    _emit(rep.to_dict())


def _read_images(paths, limit: int) -> np.ndarray:
    """uint8 (count, channels, H, W) from IDX image files or binary PPMs."""
    imgs = []
    for p in map(Path, paths):
        if p.suffix == ".ppm":
            imgs.append(np.moveaxis(report.read_ppm(p), -1, 0)[None])
        else:
            imgs.append(data._read_idx(p, data.IMAGES_MAGIC, 3)[:, None])
    return np.concatenate(imgs)[:limit]


def cmd_viz(args) -> None:
    params, vcfg, meta = vit.load_checkpoint(args.ckpt)
    sched = _ckpt_schedule(meta, args.rho)
    raw = _read_images(args.images, args.limit)
    if raw.shape[1] != vcfg.channels_in:
        raw = raw.mean(axis=1, keepdims=True).astype(np.uint8) if vcfg.channels_in == 1 else np.repeat(raw, vcfg.channels_in, axis=1)
    norm = meta.get("normalization", {})
    ds = data.Dataset(raw, np.zeros(len(raw), dtype=np.int64), vcfg.num_classes, "viz")
    if norm:
        ds.mean, ds.std = np.array(norm["mean"]), np.array(norm["std"])
    masks = report.inference_masks(params, vcfg, sched, ds.floats())
    written = report.export_mask_viz(raw, masks, args.out, vcfg.patch_size)
    _emit({"out": str(args.out), "files": len(written), "stages": len(masks)})


def cmd_stats(args) -> None:
    params, vcfg, meta = vit.load_checkpoint(args.ckpt)
    sched = _ckpt_schedule(meta, args.rho)
    _, va = load_data(args.data or meta.get("data", "synth"), {**DATA_KEYS, **meta.get("data_opts", {})}, vcfg, vcfg.num_classes)
    grids = report.keep_prob_stats(params, vcfg, sched, va)
    report.write_grid_csv(args.out, grids)
    png = report.plot_keep_grids(grids, Path(args.out).with_suffix(".png"))
    _emit({"out": str(args.out), "figure": str(png), "stage_means": [float(g.mean()) for g in grids]})


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dyntok", description="Dynamic token sparsification for small vision transformers")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("make-data", help="write a synthetic IDX dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--val-per-class", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("pretrain", help="train the plain teacher network")
    p.add_argument("--config")
    p.add_argument("--data", help="IDX directory, or 'synth' (default)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune with token sparsification")
    p.add_argument("--teacher", required=True)
    p.add_argument("--rho", type=float)
    p.add_argument("--stages")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="inference-mode accuracy under a selection strategy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--strategy", default="prediction", choices=sorted(set(STRATEGIES) | set(STRATEGY_ALIASES)))
    p.add_argument("--rho", type=float)
    p.add_argument("--stages")
    p.add_argument("--data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="analytic FLOPs report")
    p.add_argument("--arch", default="deit-s", help="preset name or JSON architecture file")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--stages")
    p.add_argument("--strategy", default="prediction", choices=STRATEGIES)
    p.add_argument("--width-dims", help="comma-separated widths for a width-scaling table")
    p.add_argument("--csv", help="also write CSV (and a PNG figure for width tables)")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("bench", help="measured throughput, pruned vs unpruned")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rho", type=float)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--workers", type=int)
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("viz", help="export mask visualizations (PPM + JSON)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", nargs="+", required=True, help="IDX image files or binary PPMs")
    p.add_argument("--out", required=True)
    p.add_argument("--rho", type=float)
    p.add_argument("--limit", type=int, default=16)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("stats", help="per-position keep probability grids (CSV + PNG)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--rho", type=float)
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
