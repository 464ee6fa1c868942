"""Per-layer routing divergence and expert-capacity allocation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ParallelCorpus, monolingual
from .model import Checkpoint, ModelConfig, forward_many
from .numerics import ContractError

METHODS = ("uniform", "dynamic", "inverse-dynamic")


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in bits, clamped to [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ContractError(f"distributions must be 1-D and equal length, got {p.shape} and {q.shape}")
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ContractError(f"{name} has negative or non-finite entries")
        if abs(d.sum() - 1.0) > 1e-6:
            raise ContractError(f"{name} sums to {d.sum()!r}, expected 1")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    return min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), 1.0)


@dataclass
class DivergenceProfile:
    lang: int
    scores: np.ndarray  # [L]
    n_passages: int = 0
    reference_lang: int = 0

    def to_rows(self):
        return [(self.lang, l, float(d)) for l, d in enumerate(self.scores)]


def divergence_profile(
    ckpt: Checkpoint,
    corpus: ParallelCorpus,
    lang: int,
    split: str = "dev",
    passage_ids: Sequence[int] | None = None,
    reference_lang: int = 0,
) -> DivergenceProfile:
    """Mean per-layer JS divergence between token-mean routing of a passage and its pivot rendering."""
    rows = corpus.split(split)
    ids = list(range(len(rows))) if passage_ids is None else [int(i) for i in passage_ids]
    if not ids:
        raise ValueError("no passages")
    a = [monolingual(rows[i], corpus.languages[lang]) for i in ids]
    b = [monolingual(rows[i], corpus.languages[reference_lang]) for i in ids]
    _, ta = forward_many(ckpt, a, capture=True)
    _, tb = forward_many(ckpt, b, capture=True)
    L = ckpt.config.n_layers
    per = np.zeros((len(ids), L))
    for n, (x, y) in enumerate(zip(ta, tb)):
        for l in range(L):
            per[n, l] = js_divergence(x.token_mean(l), y.token_mean(l))
    scores = np.array([math.fsum(per[:, l]) / len(ids) for l in range(L)])
    return DivergenceProfile(lang, scores, len(ids), reference_lang)


def mean_profile(profiles: Sequence[DivergenceProfile]) -> DivergenceProfile:
    if not profiles:
        raise ValueError("no profiles")
    L = len(profiles[0].scores)
    if any(len(p.scores) != L for p in profiles):
        raise ValueError("profiles differ in layer count")
    scores = np.array([math.fsum(p.scores[l] for p in profiles) / len(profiles) for l in range(L)])
    return DivergenceProfile(-1, scores, sum(p.n_passages for p in profiles), profiles[0].reference_lang)


def write_profiles(profiles: Sequence[DivergenceProfile], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "language", "d"])
        for p in profiles:
            for lang, l, d in p.to_rows():
                w.writerow([l, lang, repr(d)])


def read_profiles(path: str | Path) -> list[DivergenceProfile]:
    by: dict[int, dict[int, float]] = {}
    with open(path) as fh:
        for r in csv.DictReader(fh):
            by.setdefault(int(r["language"]), {})[int(r["layer"])] = float(r["d"])
    return [DivergenceProfile(k, np.array([v[l] for l in sorted(v)])) for k, v in by.items()]


# --------------------------------------------------------------------------
# capacity plans


@dataclass
class CapacityPlan:
    k: int
    capacities: list[int]
    method: str
    n_experts: int
    top_k: int
    real: list[float] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.capacities)


def _shape(config: ModelConfig) -> tuple[int, int, int]:
    eps = set(config.experts_per_layer)
    if len(eps) != 1:
        raise ContractError("allocation needs an unpruned model with equal experts per layer")
    return len(config.experts_per_layer), eps.pop(), config.top_k


def _check_k(k: int, E: int, K: int) -> None:
    if not 0 <= k <= E - K:
        raise ContractError(f"k={k} outside [0, {E - K}]")


def allocate_uniform(config: ModelConfig, k: int) -> CapacityPlan:
    L, E, K = _shape(config)
    _check_k(k, E, K)
    return CapacityPlan(k, [E - k] * L, "uniform", E, K, [float(E - k)] * L)


def hamilton_round(real: Sequence[float], total: int, lo: int, hi: int) -> list[int]:
    """Largest-remainder rounding of ``real`` to integers in [lo, hi] summing to ``total``.

    Ties in the remainder go to the lower layer index.
    """
    x = [round(float(v), 9) for v in real]
    if not len(x) * lo <= total <= len(x) * hi:
        raise ContractError(f"total {total} unreachable with {len(x)} layers in [{lo}, {hi}]")
    base = [min(max(math.floor(v), lo), hi) for v in x]
    rem = [v - b for v, b in zip(x, base)]
    short = total - sum(base)
    if short >= 0:
        order = sorted(range(len(x)), key=lambda i: (-rem[i], i))
        while short:
            for i in order:
                if short and base[i] < hi:
                    base[i] += 1
                    short -= 1
    else:
        order = sorted(range(len(x)), key=lambda i: (rem[i], -i))
        while short:
            for i in order:
                if short and base[i] > lo:
                    base[i] -= 1
                    short += 1
    return base


def dynamic_real(d: Sequence[float], L: int, E: int, K: int, k: int) -> list[float]:
    """Real capacities: floor of K per layer, the rest split in proportion to ``d``.

    Layers that would exceed E are capped and the overflow is redistributed among
    the rest; when all remaining divergences are zero the budget splits equally.
    """
    d = [float(v) for v in d]
    if len(d) != L:
        raise ContractError(f"profile has {len(d)} layers, model has {L}")
    if any(v < 0 or not math.isfinite(v) for v in d):
        raise ContractError("divergences must be finite and >= 0")
    c = [float(K)] * L
    budget = float(L * (E - k) - L * K)
    full = [False] * L
    while budget > 1e-12:
        open_ = [i for i in range(L) if not full[i]]
        if not open_:
            break
        s = math.fsum(d[i] for i in open_)
        inc = {i: (d[i] / s if s > 0 else 1.0 / len(open_)) * budget for i in open_}
        overflow = 0.0
        for i in open_:
            v = c[i] + inc[i]
            if v >= E:
                overflow += v - E
                v = float(E)
                full[i] = True
            c[i] = v
        budget = overflow
    return c


def allocate_dynamic(profile: DivergenceProfile | Sequence[float], config: ModelConfig, k: int) -> CapacityPlan:
    L, E, K = _shape(config)
    _check_k(k, E, K)
    d = profile.scores if isinstance(profile, DivergenceProfile) else profile
    real = dynamic_real(d, L, E, K, k)
    return CapacityPlan(k, hamilton_round(real, L * (E - k), K, E), "dynamic", E, K, real)


def allocate_inverse_dynamic(
    profile: DivergenceProfile | Sequence[float], config: ModelConfig, k: int
) -> CapacityPlan:
    """Dynamic allocation on the mirrored profile ``max + min - d``."""
    d = np.asarray(profile.scores if isinstance(profile, DivergenceProfile) else profile, dtype=np.float64)
    plan = allocate_dynamic(list(d.max() + d.min() - d), config, k)
    plan.method = "inverse-dynamic"
    return plan


def allocate(method: str, config: ModelConfig, k: int, profile=None) -> CapacityPlan:
    if method == "uniform":
        return allocate_uniform(config, k)
    if profile is None:
        raise ValueError(f"{method} allocation needs a divergence profile")
    if method == "dynamic":
        return allocate_dynamic(profile, config, k)
    if method == "inverse-dynamic":
        return allocate_inverse_dynamic(profile, config, k)
    raise ValueError(f"unknown allocation method {method!r}; expected one of {METHODS}")


def write_plans(plans: Sequence[CapacityPlan], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "retained", "pruned", "method", "k", "real"])
        for p in plans:
            for l, c in enumerate(p.capacities):
                w.writerow([l, c, p.n_experts - c, p.method, p.k, repr(p.real[l]) if p.real else ""])


def read_plans(path: str | Path, n_experts: int, top_k: int) -> list[CapacityPlan]:
    by: dict[tuple[str, int], dict[int, tuple[int, float]]] = {}
    with open(path) as fh:
        for r in csv.DictReader(fh):
            by.setdefault((r["method"], int(r["k"])), {})[int(r["layer"])] = (
                int(r["retained"]), float(r["real"]) if r["real"] else float("nan"))
    out = []
    for (m, k), rows in by.items():
        ls = sorted(rows)
        out.append(CapacityPlan(k, [rows[l][0] for l in ls], m, n_experts, top_k, [rows[l][1] for l in ls]))
    return out
