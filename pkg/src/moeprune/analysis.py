"""Overlap of retained expert sets across masks, against independent random retention."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .allocation import CapacityPlan
from .numerics import ContractError
from .surgeon import PruneMask


def _elements(mask: PruneMask) -> set[tuple[int, int]]:
    ids = mask.original or mask.retained
    return {(l, e) for l, r in enumerate(ids) for e in r}


def _iou(sets: Sequence[set]) -> float:
    union = set().union(*sets)
    if not union:
        return 1.0
    return len(set.intersection(*map(set, sets))) / len(union)


def retained_iou(masks: Sequence[PruneMask]) -> tuple[float, float]:
    """Global IoU over (layer, original expert) pairs: (mean over unordered pairs, all masks jointly)."""
    if len(masks) < 2:
        raise ValueError("need at least two masks")
    L = len(masks[0].retained)
    if any(len(m.retained) != L for m in masks):
        raise ContractError("masks differ in layer count")
    sets = [_elements(m) for m in masks]
    pair = [_iou([a, b]) for a, b in itertools.combinations(sets, 2)]
    return math.fsum(pair) / len(pair), _iou(sets)


def _plan_shape(plans: Sequence[CapacityPlan]) -> tuple[int, int]:
    if len(plans) < 2:
        raise ValueError("need at least two plans")
    L, E = len(plans[0].capacities), plans[0].n_experts
    if any(len(p.capacities) != L or p.n_experts != E for p in plans):
        raise ContractError("plans differ in layer count or experts per layer")
    return L, E


def _pair_baseline(a: Sequence[int], b: Sequence[int], E: int) -> float:
    inter = math.fsum(x * y / E for x, y in zip(a, b))
    union = math.fsum(x + y - x * y / E for x, y in zip(a, b))
    return inter / union if union else 1.0


def random_baseline_iou(plans: Sequence[CapacityPlan]) -> tuple[float, float]:
    """Ratio-of-expectations IoU for independent uniform retention with the plans' per-layer counts."""
    L, E = _plan_shape(plans)
    caps = [p.capacities for p in plans]
    pair = [_pair_baseline(a, b, E) for a, b in itertools.combinations(caps, 2)]
    inter = union = 0.0
    for l in range(L):
        fr = [c[l] / E for c in caps]
        inter += E * math.prod(fr)
        union += E * (1.0 - math.prod(1.0 - f for f in fr))
    return math.fsum(pair) / len(pair), (inter / union if union else 1.0)


@dataclass(frozen=True)
class MonteCarloIoU:
    """Monte Carlo estimates of the random-retention baseline.

    ``pairwise``/``alln`` estimate the same ratio of expectations as the closed
    form (sample-mean intersection over sample-mean union, delta-method standard
    error). ``pairwise_mean_ratio``/``alln_mean_ratio`` are the plain means of
    per-trial IoUs, which sit slightly above it.
    """

    pairwise: float
    pairwise_se: float
    alln: float
    alln_se: float
    trials: int
    pairwise_mean_ratio: float = float("nan")
    alln_mean_ratio: float = float("nan")


def _ratio_of_means(inter: np.ndarray, union: np.ndarray) -> tuple[float, np.ndarray]:
    """Ratio of sample means and its per-trial linearized influence."""
    ui = float(union.mean())
    r = float(inter.mean()) / ui
    return r, (inter - r * union) / ui


def monte_carlo_iou(plans: Sequence[CapacityPlan], trials: int = 10_000, seed: int = 0) -> MonteCarloIoU:
    """Sample independent per-layer retained subsets; trial ``i`` uses generator ``[seed, i]``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    L, E = _plan_shape(plans)
    n = len(plans)
    pairs = list(itertools.combinations(range(n), 2))
    pi = np.empty((trials, len(pairs)))
    pu = np.empty((trials, len(pairs)))
    ai = np.empty(trials)
    au = np.empty(trials)
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        m = np.zeros((n, L, E), bool)  # membership[plan, layer, expert]
        for i, p in enumerate(plans):
            order = np.argsort(rng.random((L, E)), axis=1)
            for l, c in enumerate(p.capacities):
                m[i, l, order[l, :c]] = True
        flat = m.reshape(n, -1)
        for j, (a, b) in enumerate(pairs):
            pi[t, j] = np.count_nonzero(flat[a] & flat[b])
            pu[t, j] = np.count_nonzero(flat[a] | flat[b])
        ai[t] = np.count_nonzero(flat.all(axis=0))
        au[t] = np.count_nonzero(flat.any(axis=0))

    def se(z):
        return float(z.std(ddof=1) / math.sqrt(len(z))) if len(z) > 1 else 0.0

    rs, zs = zip(*(_ratio_of_means(pi[:, j], pu[:, j]) for j in range(len(pairs))))
    pw, zp = float(np.mean(rs)), np.mean(zs, axis=0)
    al, za = _ratio_of_means(ai, au)
    return MonteCarloIoU(
        pw, se(zp), al, se(za), trials,
        float(np.mean(pi / pu)), float(np.mean(ai / au)),
    )


def excess_iou(observed: float, random: float) -> float:
    """Rescale so 0 is random-expected overlap and 1 is identical masks."""
    if random >= 1:
        raise ContractError("excess IoU undefined when the random baseline is 1")
    return (observed - random) / (1.0 - random)


@dataclass
class OverlapRow:
    k: int
    pct_dropped: float
    pairwise_obs: float
    pairwise_rand: float
    pairwise_excess: float
    alln_obs: float
    alln_rand: float
    alln_excess: float


def _clamp(x: float) -> float:
    return min(max(x, -1.0), 1.0)


def overlap_row(masks: Sequence[PruneMask], plans: Sequence[CapacityPlan]) -> OverlapRow:
    po, ao = retained_iou(masks)
    pr, ar = random_baseline_iou(plans)
    k, E = plans[0].k, plans[0].n_experts
    if any(p.k != k for p in plans):
        raise ContractError("plans differ in k")
    pe = _clamp(excess_iou(po, pr)) if pr < 1 else float("nan")
    ae = _clamp(excess_iou(ao, ar)) if ar < 1 else float("nan")
    return OverlapRow(k, 100.0 * k / E, po, pr, pe, ao, ar, ae)


@dataclass
class OverlapReport:
    rows: list[OverlapRow]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(OverlapRow.__dataclass_fields__))
            for r in self.rows:
                w.writerow([r.k] + [repr(float(getattr(r, f))) for f in list(OverlapRow.__dataclass_fields__)[1:]])


def write_layer_sets(masks: dict[str, PruneMask], path: str | Path) -> None:
    """Long-form (mask, layer, expert) table of retained original ids."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mask", "layer", "expert"])
        for name, m in masks.items():
            for l, e in sorted(_elements(m)):
                w.writerow([name, l, e])
