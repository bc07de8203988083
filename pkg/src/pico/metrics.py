"""Anomaly maps and evaluation metrics.

Image scoring follows the reconstruction convention: the per-pixel squared
error is smoothed with a small Gaussian and the image score is the smoothed
maximum, so a sharp local defect outranks diffuse background error. AUROC is
the Mann-Whitney rank statistic with average ranks on ties; AUPRO integrates
mean per-region overlap against false-positive rate up to a cap and
normalizes by the cap. Independent brute-force implementations of both live
in `pico.oracles` and the test suite holds the two routes together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UndefinedMetricError

GAUSS_SIZE = 5
GAUSS_SIGMA = 1.0


def _gauss_kernel() -> np.ndarray:
    half = GAUSS_SIZE // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * GAUSS_SIGMA**2))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def smooth(arr: np.ndarray) -> np.ndarray:
    """5x5 Gaussian, sigma 1, mirror padding; preserves total mass."""
    half = GAUSS_SIZE // 2
    padded = np.pad(arr.astype(np.float64), half, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (GAUSS_SIZE, GAUSS_SIZE))
    return np.einsum("hwij,ij->hw", windows, _KERNEL)


@dataclass
class AnomalyMap:
    scores: np.ndarray          # smoothed per-pixel squared error
    image_score: float          # max of the smoothed map


def anomaly_map(x_norm: np.ndarray, x_hat: np.ndarray) -> AnomalyMap:
    if x_norm.shape != x_hat.shape:
        raise ShapeError(f"map inputs differ: {x_norm.shape} vs {x_hat.shape}")
    raw = (np.asarray(x_norm, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)) ** 2
    sm = smooth(raw)
    return AnomalyMap(scores=sm, image_score=float(sm.max()))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ties receive the mean of their positions."""
    uniq, inv, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return (starts + (counts + 1) / 2.0)[inv]


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} differ")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = _average_ranks(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """4-connected components of a boolean mask, as boolean arrays."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    comps = []
    H, W = mask.shape
    for sy, sx in zip(*np.nonzero(mask)):
        if seen[sy, sx]:
            continue
        stack = [(sy, sx)]
        seen[sy, sx] = True
        pixels = []
        while stack:
            y, x = stack.pop()
            pixels.append((y, x))
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < H and 0 <= nx < W and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
        comp = np.zeros_like(mask)
        ys, xs = zip(*pixels)
        comp[list(ys), list(xs)] = True
        comps.append(comp)
    return comps


def _pro_fpr_curve(maps, masks, thresholds):
    """(fpr, pro) per descending threshold under score >= t binarization."""
    region_scores = []
    for m, mask in zip(maps, masks):
        for comp in connected_components(mask):
            region_scores.append(np.sort(np.asarray(m, dtype=np.float64)[comp]))
    if not region_scores:
        raise UndefinedMetricError("AUPRO needs at least one anomalous region")
    normal = np.sort(
        np.concatenate([np.asarray(m, dtype=np.float64)[~np.asarray(k, dtype=bool)] for m, k in zip(maps, masks)])
    )
    if normal.size == 0:
        raise UndefinedMetricError("AUPRO needs normal pixels for the FPR axis")

    fprs, pros = [], []
    for t in thresholds:
        fprs.append(1.0 - np.searchsorted(normal, t, side="left") / normal.size)
        pros.append(float(np.mean([1.0 - np.searchsorted(r, t, side="left") / r.size for r in region_scores])))
    return np.array(fprs), np.array(pros)


def integrate_to_limit(fprs: np.ndarray, pros: np.ndarray, fpr_limit: float) -> float:
    """Trapezoid area under (fpr, pro) from 0 to fpr_limit, normalized by the limit.

    The curve is prepended with (0, 0) and interpolated at the cap.
    """
    fx = np.concatenate([[0.0], fprs])
    fy = np.concatenate([[0.0], pros])
    order = np.argsort(fx, kind="stable")
    fx, fy = fx[order], fy[order]

    area = 0.0
    for i in range(1, len(fx)):
        x0, x1 = fx[i - 1], fx[i]
        y0, y1 = fy[i - 1], fy[i]
        if x1 <= x0:
            continue
        if x0 >= fpr_limit:
            break
        if x1 > fpr_limit:
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
            x1 = fpr_limit
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return area / fpr_limit


EXACT_SWEEP_SIZE = 16  # maps at most this wide use every threshold


def aupro(maps, masks, fpr_limit: float = 0.3, max_thresholds: int = 200) -> float:
    """Normalized area under the per-region-overlap curve up to `fpr_limit`."""
    if not 0.0 < fpr_limit <= 1.0:
        raise UndefinedMetricError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    all_scores = np.unique(np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps]))
    exact = all(max(np.asarray(m).shape) <= EXACT_SWEEP_SIZE for m in maps)
    if exact or all_scores.size <= max_thresholds:
        thresholds = all_scores[::-1]
    else:
        idx = np.unique(np.round(np.linspace(0, all_scores.size - 1, max_thresholds)).astype(int))
        thresholds = all_scores[idx][::-1]
    fprs, pros = _pro_fpr_curve(maps, masks, thresholds)
    return integrate_to_limit(fprs, pros, fpr_limit)


@dataclass
class CaseResult:
    id: str
    label: int
    score: float
    pose: int


@dataclass
class EvalReport:
    o_auroc: float
    p_auroc: float
    aupro: float
    n_normal: int
    n_defect: int
    cases: list[CaseResult] = field(default_factory=list)


def evaluate(model, dataset, rows) -> tuple[EvalReport, list[AnomalyMap]]:
    """Run the model over dataset rows and score the split."""
    from .tensor import no_grad

    cases, maps, masks = [], [], []
    with no_grad():
        for row in rows:
            img = dataset.image(row["id"])
            x_norm, x_hat, _, _ = model.forward(img)
            am = anomaly_map(x_norm.numpy(), x_hat.numpy())
            cases.append(CaseResult(id=row["id"], label=int(row["defect"]), score=am.image_score, pose=int(row["pose"])))
            maps.append(am.scores)
            masks.append(dataset.mask(row["id"]))

    labels = np.array([c.label for c in cases])
    scores = np.array([c.score for c in cases])
    o = auroc(scores, labels)
    pixel_scores = np.concatenate([m.ravel() for m in maps])
    pixel_labels = np.concatenate([k.ravel().astype(int) for k in masks])
    p = auroc(pixel_scores, pixel_labels)
    pro = aupro(maps, masks)
    report = EvalReport(
        o_auroc=o,
        p_auroc=p,
        aupro=pro,
        n_normal=int((labels == 0).sum()),
        n_defect=int((labels == 1).sum()),
        cases=cases,
    )
    return report, [AnomalyMap(scores=m, image_score=float(m.max())) for m in maps]
