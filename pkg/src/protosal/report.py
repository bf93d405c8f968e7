"""Summary report: performance, agreement, ranks, significance and overlay
grids."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np
from PIL import Image

from .formats import read_csv, read_heatmaps, write_csv
from .stats import PUBLISHED_CD_K8_N10, Q_TABLE, nemenyi_cd

TILE_GAP = 2


def overlay(image: np.ndarray, values: np.ndarray, absolute: bool, strength: float = 0.8) -> np.ndarray:
    """Blend a heatmap over an RGB image in [0,1]. Signed maps: green for
    positive evidence, red for negative. Magnitude maps: blue."""
    img = np.asarray(image, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    scale = np.abs(v).max()
    mag = np.abs(v) / scale if scale > 0 else np.zeros_like(v)
    color = np.zeros(img.shape)
    if absolute:
        color[..., 2] = 1.0
    else:
        color[..., 1] = v > 0
        color[..., 0] = v < 0
    a = (strength * mag)[..., None]
    return (1 - a) * img + a * color


def _to_uint8(x):
    return np.clip(np.round(x * 255), 0, 255).astype(np.uint8)


def overlay_grid(rows: list[list[np.ndarray]]) -> Image.Image:
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    canvas = np.ones((len(rows) * (h + TILE_GAP) - TILE_GAP, ncol * (w + TILE_GAP) - TILE_GAP, 3))
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            y, x = i * (h + TILE_GAP), j * (w + TILE_GAP)
            canvas[y:y + h, x:x + w] = tile
    return Image.fromarray(_to_uint8(canvas))


def _md_table(header, rows) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return out


def _f(x, nd=4):
    return "n/a" if x != x else f"{x:.{nd}f}"


def write_report(cfg, paths, test, perf, agree) -> Path:
    out = paths.report_dir
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    lines = ["# Run report", "", f"Seed {cfg.run.seed}; architectures: {', '.join(cfg.run.architectures)}; "
             f"{len(test)} test patches.", ""]

    lines += ["## Classification performance (test split)", ""]
    rows = [(a, m, _f(p["accuracy"]), _f(p["precision"]), _f(p["recall"]), _f(p["auc"])) for a, m, p in perf]
    lines += _md_table(["architecture", "model", "accuracy", "precision", "recall", "AUC"], rows) + [""]
    write_csv(out / "performance.csv", ["architecture", "model", "accuracy", "precision", "recall", "auc"],
              [(a, m, p["accuracy"], p["precision"], p["recall"], p["auc"]) for a, m, p in perf])

    lines += ["## CNN vs ProtoPNet agreement", "",
              "CNN hard labels serve as ground truth for ProtoPNet probabilities.", ""]
    rows = [(a, _f(p["auc"]), _f(p["accuracy"]), _f(p["precision"]), _f(p["recall"])) for a, p in agree]
    lines += _md_table(["architecture", "AUC", "accuracy", "precision", "recall"], rows) + [""]
    write_csv(out / "agreement.csv", ["architecture", "auc", "accuracy", "precision", "recall"],
              [(a, p["auc"], p["accuracy"], p["precision"], p["recall"]) for a, p in agree])

    ranks = read_csv(paths.ranks)
    cols = [c for c in ranks[0] if c != "method"] if ranks else []
    lines += ["## Average rank of overlap (1 = largest overlap)", ""]
    rows = [(r["method"], *(_f(float(r[c]), 2) for c in cols)) for r in ranks]
    lines += _md_table(["method", *cols], rows) + [""]
    if cols:
        means = sorted(((np.mean([float(r[c]) for c in cols]), r["method"]) for r in ranks))
        lines += ["Mean rank across all columns: " + ", ".join(f"{m} {v:.2f}" for v, m in means) + ".", ""]

    stats = read_csv(paths.rank_stats)
    lines += ["## Friedman and Nemenyi", ""]
    rows = [(s["architecture"], s["slot"], s["n_metrics"], _f(float(s["chi_square"]), 3),
             _f(float(s["f_statistic"]), 3), _f(float(s["p_value"])), _f(float(s["cd"]))) for s in stats]
    lines += _md_table(["architecture", "prototype", "metrics", "chi2", "F", "p", "CD"], rows) + [""]
    cd_ref = nemenyi_cd(8, 10, 0.05).cd
    lines += [f"Critical difference for k=8 methods over N=10 metrics at alpha=0.05: {cd_ref:.5f} "
              f"(q = {Q_TABLE[0.05][6]:.6f}). The previously published CD of {PUBLISHED_CD_K8_N10} does not "
              f"follow from this formula: it coincides with the q value for k=7 ({Q_TABLE[0.05][5]:.3f}). "
              f"Rank comparisons here use {cd_ref:.5f}.", ""]

    pairs = read_csv(paths.pairs)
    lines += ["## Significantly different method pairs", ""]
    if pairs:
        rows = [(p["architecture"], p["slot"], p["method_a"], p["method_b"], _f(float(p["rank_difference"]), 2),
                 _f(float(p["cd"]))) for p in pairs]
        lines += _md_table(["architecture", "prototype", "method A", "method B", "rank difference", "CD"], rows)
    else:
        lines.append("No pair's average-rank difference exceeds the critical difference.")
    lines.append("")

    lines += ["## Overlays", ""]
    index = {sid: i for i, sid in enumerate(test.ids)}
    for arch in cfg.run.architectures:
        sal_path, att_path = paths.saliency(arch), paths.attribution(arch)
        if not (sal_path.exists() and att_path.exists()):
            continue
        by_image = defaultdict(list)
        for r in read_heatmaps(sal_path) + read_heatmaps(att_path):
            by_image[r.image_id].append(r)
        chosen = list(by_image)[:cfg.explain.overlay_images]
        if not chosen:
            continue
        grid_rows = []
        for image_id in chosen:
            img = test.X[index[image_id]]
            grid_rows.append([img] + [overlay(img, r.values, r.absolute) for r in by_image[image_id]])
        name = f"overlays/{arch}.png"
        overlay_grid(grid_rows).save(out / name)
        sources = [r.source for r in by_image[chosen[0]]]
        lines += [f"![{arch}]({name})", "", f"Columns: image, {', '.join(sources)}. "
                  "Green marks positive evidence, red negative, blue magnitude-only maps.", ""]
    path = out / "report.md"
    path.write_text("\n".join(lines))
    return path
