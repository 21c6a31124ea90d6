"""Mask visualizations, keep-probability statistics and report figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dyntok import tensor as T  # noqa: E402
from dyntok import vit  # noqa: E402
from dyntok.data import Dataset  # noqa: E402
from dyntok.pruning import PruneSchedule  # noqa: E402

DARKEN = 0.25


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6) from an (H, W, 3) uint8 array."""
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def _to_rgb(image: np.ndarray) -> np.ndarray:
    """(channels, H, W) uint8 -> (H, W, 3)."""
    img = np.moveaxis(np.asarray(image, dtype=np.uint8), 0, -1)
    return np.repeat(img, 3, axis=-1) if img.shape[-1] == 1 else img[..., :3]


def darken_dropped(image: np.ndarray, keep: np.ndarray, patch: int) -> np.ndarray:
    """Scale the pixels of dropped patches by ``DARKEN``; ``keep`` is (grid*grid,) bits."""
    rgb = _to_rgb(image).copy()
    grid = rgb.shape[0] // patch
    for cell in np.flatnonzero(np.asarray(keep).reshape(-1) == 0):
        r, c = divmod(int(cell), grid)
        sl = (slice(r * patch, (r + 1) * patch), slice(c * patch, (c + 1) * patch))
        rgb[sl] = np.floor(rgb[sl] * DARKEN).astype(np.uint8)
    return rgb


def export_mask_viz(images: np.ndarray, stage_masks: list[np.ndarray], out_dir, patch: int, prefix: str = "img") -> list[Path]:
    """One PPM per image per stage with dropped patches darkened, plus a JSON sidecar of mask bits.

    ``stage_masks`` holds one (count, N) array of patch keep bits per stage.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, img in enumerate(images):
        bits = [np.asarray(m[i]).astype(int).tolist() for m in stage_masks]
        for s, keep in enumerate(bits):
            path = out_dir / f"{prefix}{i:04d}_stage{s + 1}.ppm"
            write_ppm(path, darken_dropped(img, np.array(keep), patch))
            written.append(path)
        grid = img.shape[-1] // patch
        sidecar = {"grid": grid, "patch_size": patch, "darken": DARKEN, "stages": bits}
        (out_dir / f"{prefix}{i:04d}.json").write_text(json.dumps(sidecar))
    return written


def inference_masks(params, config: vit.ViTConfig, schedule: PruneSchedule, images: np.ndarray, batch_size: int = 128) -> list[np.ndarray]:
    """Per-stage (count, N) keep bits in original patch order from gathered inference."""
    per_stage: list[list[np.ndarray]] = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out = vit.forward(images[start : start + batch_size], params, config, schedule, mode="infer")
            for s, m in enumerate(out.masks):
                if len(per_stage) <= s:
                    per_stage.append([])
                per_stage[s].append(m.data[:, 1:])
    return [np.concatenate(chunks) for chunks in per_stage]


def keep_prob_stats(params, config: vit.ViTConfig, schedule: PruneSchedule, dataset: Dataset) -> np.ndarray:
    """Mean keep decision per spatial position, (stages, grid, grid)."""
    masks = inference_masks(params, config, schedule, dataset.floats())
    g = config.grid
    return np.stack([m.mean(axis=0).reshape(g, g) for m in masks]) if masks else np.zeros((0, g, g))


def write_grid_csv(path, grids: np.ndarray) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        g = grids.shape[-1]
        w.writerow(["stage", "row"] + [f"c{j}" for j in range(g)])
        for s, grid in enumerate(grids):
            for r, row in enumerate(grid):
                w.writerow([s + 1, r] + [f"{v:.6f}" for v in row])


def read_grid_csv(path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    stages = max(int(r[0]) for r in rows)
    g = len(rows[0]) - 2
    out = np.zeros((stages, g, g))
    for r in rows:
        out[int(r[0]) - 1, int(r[1])] = [float(v) for v in r[2:]]
    return out


def plot_keep_grids(grids: np.ndarray, path) -> Path:
    n = len(grids)
    fig, axes = plt.subplots(1, max(1, n), figsize=(3.2 * max(1, n), 3), squeeze=False)
    for s, ax in enumerate(axes[0]):
        if s >= n:
            ax.axis("off")
            continue
        im = ax.imshow(grids[s], vmin=0, vmax=1, cmap="viridis")
        ax.set_title(f"stage {s + 1}: mean {grids[s].mean():.2f}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="keep probability")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_width_scaling(rows: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    dims = [r["embed_dim"] for r in rows]
    ax.plot([r["gflops"] for r in rows], dims, "o-", label="width scaling")
    ax.plot([r["gflops_pruned"] for r in rows], dims, "s--", label="token sparsification")
    ax.set_xlabel("GFLOPs")
    ax.set_ylabel("embedding width")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_history(history: list[dict], targets: list[float], path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    epochs = [h["epoch"] for h in history]
    for key in ("total", "cls", "kl", "distill", "ratio"):
        if key in history[0]:
            ax1.plot(epochs, [h[key] for h in history], label=key)
    ax1.set_xlabel("epoch")
    ax1.set_yscale("log")
    ax1.legend(frameon=False, fontsize=8)
    ratios = np.array([h.get("ratios", []) for h in history])
    for s in range(ratios.shape[1] if ratios.ndim == 2 else 0):
        line = ax2.plot(epochs, ratios[:, s], label=f"stage {s + 1}")[0]
        ax2.axhline(targets[s], color=line.get_color(), ls=":", lw=0.8)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("kept fraction")
    ax2.set_ylim(0, 1.05)
    ax2.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
