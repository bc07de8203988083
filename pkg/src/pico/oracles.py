"""Brute-force reference implementations for the metric layer.

These trade speed for obviousness: AUROC counts every positive/negative pair
directly and AUPRO walks every distinct threshold with plain boolean means.
They exist so the fast implementations in `pico.metrics` can be checked
against code with no shared machinery.
"""

from __future__ import annotations

import numpy as np

from .errors import UndefinedMetricError
from .metrics import connected_components


def auroc_pairwise(scores, labels) -> float:
    """O(n^2) pairwise comparison; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (pos.size * neg.size)


def aupro_exhaustive(maps, masks, fpr_limit: float = 0.3) -> float:
    """Every unique score value is a threshold; per-threshold stats by loops."""
    regions = []
    for m, mask in zip(maps, masks):
        for comp in connected_components(mask):
            regions.append((np.asarray(m, dtype=np.float64), comp))
    if not regions:
        raise UndefinedMetricError("AUPRO needs at least one anomalous region")

    normal_pixels = []
    for m, mask in zip(maps, masks):
        normal_pixels.extend(np.asarray(m, dtype=np.float64)[~np.asarray(mask, dtype=bool)].tolist())
    normal_pixels = np.array(normal_pixels)
    if normal_pixels.size == 0:
        raise UndefinedMetricError("AUPRO needs normal pixels for the FPR axis")

    thresholds = np.unique(np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps]))[::-1]
    points = [(0.0, 0.0)]
    for t in thresholds:
        fpr = float(np.mean(normal_pixels >= t))
        pro = float(np.mean([np.mean(m[comp] >= t) for m, comp in regions]))
        points.append((fpr, pro))

    # Trapezoid up to the cap, interpolating the final segment if it crosses it.
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        if x1 <= x0 or x0 >= fpr_limit:
            continue
        if x1 > fpr_limit:
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
            x1 = fpr_limit
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area / fpr_limit
