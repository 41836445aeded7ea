"""Unsupervised segmentation metrics: mBO (instance / class), Hungarian mIoU, FG-ARI."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .config import ConfigError

SOURCES = ("decoder", "slot_attention", "max", "ensemble")
_SOURCE_ALIASES = {"slot": "slot_attention", "ens": "ensemble", "dec": "decoder"}


class ResolutionError(ValueError):
    pass


def masks_from_attention(attn: np.ndarray, grid_h: int, grid_w: int, out_h: int, out_w: int) -> np.ndarray:
    """Argmax slot per patch (labels 1..k, ties to the lower slot), nearest-neighbour upsampled."""
    a = np.asarray(attn)
    if out_h % grid_h or out_w % grid_w:
        raise ResolutionError(f"cannot upsample {grid_h}x{grid_w} patches to {out_h}x{out_w}")
    labels = np.argmax(a, axis=-1) + 1
    labels = labels.reshape(a.shape[:-2] + (grid_h, grid_w))
    return np.repeat(np.repeat(labels, out_h // grid_h, axis=-2), out_w // grid_w, axis=-1)


def _iou_matrix(pred: np.ndarray, gt: np.ndarray):
    """IoU of every nonzero GT segment against every predicted segment."""
    gt_ids, gt_inv = np.unique(gt, return_inverse=True)
    pr_ids, pr_inv = np.unique(pred, return_inverse=True)
    counts = _kernels.contingency(gt_inv.ravel(), pr_inv.ravel(), len(gt_ids), len(pr_ids)).astype(np.float64)
    gt_area = counts.sum(axis=1)
    pr_area = counts.sum(axis=0)
    iou = counts / (gt_area[:, None] + pr_area[None, :] - counts)
    return iou[gt_ids != 0]


def _check(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ResolutionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in resolution")
    return pred, gt


def mbo(pred, gt, level: str = "instance") -> float | None:
    """Mean over nonzero GT segments of the best IoU with any predicted segment.

    ``gt`` holds instance ids for level='instance' and class ids for level='class';
    background pixels count toward every union. Returns None without foreground.
    """
    if level not in ("instance", "class"):
        raise ValueError(f"unknown level {level!r}")
    pred, gt = _check(pred, gt)
    iou = _iou_matrix(pred, gt)
    if iou.shape[0] == 0:
        return None
    return float(iou.max(axis=1).mean())


def miou_hungarian(pred, gt) -> float | None:
    """Mean IoU over GT segments under the best one-to-one matching to predictions."""
    pred, gt = _check(pred, gt)
    iou = _iou_matrix(pred, gt)
    g, p = iou.shape
    if g == 0:
        return None
    size = max(g, p)
    padded = np.zeros((size, size))
    padded[:g, :p] = iou
    cols = _kernels.solve_assignment(1.0 - padded)
    return float(padded[np.arange(g), cols[:g]].sum() / g)


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def fg_ari(pred, gt) -> float | None:
    """Adjusted Rand Index restricted to pixels with nonzero ground truth."""
    pred, gt = _check(pred, gt)
    fg = gt != 0
    if not fg.any():
        return None
    _, a = np.unique(gt[fg], return_inverse=True)
    _, b = np.unique(pred[fg], return_inverse=True)
    counts = _kernels.contingency(a, b, a.max() + 1, b.max() + 1)
    index = _comb2(counts).sum()
    sum_a = _comb2(counts.sum(axis=1)).sum()
    sum_b = _comb2(counts.sum(axis=0)).sum()
    total = _comb2(fg.sum())
    if total == 0:
        return 1.0
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def nblock_baseline(columns: int, k: int, h: int, w: int) -> np.ndarray:
    """``k`` rectangular blocks: ``columns`` vertical bands, each cut into horizontal blocks.

    Earlier bands take the extra block when k is not a multiple of ``columns``;
    band widths and block heights are split as evenly as possible.
    """
    if columns < 1 or k < columns:
        raise ConfigError(f"need k >= columns >= 1, got columns={columns}, k={k}")
    labels = np.zeros((h, w), dtype=np.int64)
    per_band = [k // columns + (1 if i < k % columns else 0) for i in range(columns)]
    next_label = 1
    for band_cols, blocks in zip(np.array_split(np.arange(w), columns), per_band):
        for rows in np.array_split(np.arange(h), blocks):
            labels[np.ix_(rows, band_cols)] = next_label
            next_label += 1
    return labels


# ---------------------------------------------------------------------------
# model evaluation


@dataclass
class MetricReport:
    source: str
    mbo_i: float
    mbo_c: float
    miou: float
    fg_ari: float
    n: int
    skipped: int = 0

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k != "skipped"}
        return json.dumps(d, sort_keys=False)


def score_label_maps(preds: np.ndarray, inst: np.ndarray, cls: np.ndarray, source: str) -> MetricReport:
    sums = {"mbo_i": [], "mbo_c": [], "miou": [], "fg_ari": []}
    skipped = 0
    for p, gi, gc in zip(preds, inst, cls):
        vals = (mbo(p, gi, "instance"), mbo(p, gc, "class"), miou_hungarian(p, gi), fg_ari(p, gi))
        if any(v is None for v in vals):
            skipped += 1
            continue
        for key, v in zip(sums, vals):
            sums[key].append(v)
    means = {k: float(np.mean(v)) if v else 0.0 for k, v in sums.items()}
    return MetricReport(source=source, n=len(sums["mbo_i"]), skipped=skipped, **means)


def normalize_source(source: str) -> str:
    source = _SOURCE_ALIASES.get(source, source)
    if source not in SOURCES:
        raise ConfigError(f"unknown mask source {source!r}; expected one of {SOURCES}")
    return source


def evaluate_model(model, dataset, source: str, eval_seed: int = 0, batch_size: int = 64) -> MetricReport:
    """Metrics of ``model`` masks on ``dataset`` (default permutation unless ensembling)."""
    source = normalize_source(source)
    if model.cfg.decoder.n_patches != dataset.spec.n_patches or model.cfg.decoder.d_y != dataset.spec.target_dim:
        raise ConfigError("checkpoint geometry does not match the dataset")
    if source == "max":
        reports = [evaluate_model(model, dataset, s, eval_seed, batch_size) for s in ("decoder", "slot_attention")]
        return MetricReport(
            source="max",
            mbo_i=max(r.mbo_i for r in reports), mbo_c=max(r.mbo_c for r in reports),
            miou=max(r.miou for r in reports), fg_ari=max(r.fg_ari for r in reports),
            n=reports[0].n, skipped=reports[0].skipped,
        )
    spec = dataset.spec
    internal = {"slot_attention": "slot", "decoder": "decoder", "ensemble": "ensemble"}[source]
    rng = np.random.default_rng([eval_seed, 4])
    preds = []
    for start in range(0, len(dataset), batch_size):
        patches = dataset.patches[start:start + batch_size]
        targets = dataset.targets[start:start + batch_size]
        noise = model.slot_noise(rng, len(patches))
        attn = model.masks(patches, targets, internal, noise)
        preds.append(masks_from_attention(attn, spec.grid, spec.grid, spec.image_size, spec.image_size))
    preds = np.concatenate(preds)
    return score_label_maps(preds, dataset.instance_labels, dataset.class_labels, source)
