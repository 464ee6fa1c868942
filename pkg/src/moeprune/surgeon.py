"""Prune masks, physical expert removal and the equivalence check."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .allocation import CapacityPlan
from .corpus import TranslationEpisode
from .importance import ImportanceTable
from .model import Checkpoint, forward_many
from .numerics import ContractError

EXPERT_KEYS = ("experts.up", "experts.up_bias", "experts.down", "experts.down_bias", "router.weight", "router.bias")


@dataclass
class PruneMask:
    retained: list[list[int]]  # per layer, ascending slot indices
    original: list[list[int]] = field(default_factory=list)  # same experts as ids of the unpruned model
    provenance: dict = field(default_factory=dict)

    @property
    def capacities(self) -> list[int]:
        return [len(r) for r in self.retained]

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(
            {"retained": self.retained, "original": self.original, "provenance": self.provenance},
            indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "PruneMask":
        d = json.loads(Path(path).read_text())
        return cls(d["retained"], d.get("original") or [], d.get("provenance") or {})


def build_mask(
    table: ImportanceTable, plan: CapacityPlan, ckpt: Checkpoint | None = None, provenance: dict | None = None
) -> PruneMask:
    """Keep the ``c_l`` highest-scoring experts of each layer (ties: lower index)."""
    if len(plan.capacities) != len(table.scores):
        raise ContractError(f"plan has {len(plan.capacities)} layers, table has {len(table.scores)}")
    retained = []
    for l, c in enumerate(plan.capacities):
        n = len(table.scores[l])
        if not plan.top_k <= c <= n:
            raise ContractError(f"layer {l}: capacity {c} outside [{plan.top_k}, {n}]")
        retained.append(sorted(table.ranking(l)[:c]))
    original = (
        [[ckpt.original_ids(l)[i] for i in r] for l, r in enumerate(retained)] if ckpt is not None
        else [list(r) for r in retained]
    )
    prov = {"importance": table.method, "allocation": plan.method, "k": plan.k, **(provenance or {})}
    return PruneMask(retained, original, prov)


def extract(ckpt: Checkpoint, mask: PruneMask) -> Checkpoint:
    """Physically remove the experts not in ``mask``; non-MoE parameters are copied unchanged."""
    cfg = ckpt.config
    if len(mask.retained) != cfg.n_layers:
        raise ContractError(f"mask has {len(mask.retained)} layers, model has {cfg.n_layers}")
    params = {k: v.copy() for k, v in ckpt.params.items()}
    remap = []
    for l, keep in enumerate(mask.retained):
        n = cfg.experts_per_layer[l]
        if len(keep) < cfg.top_k:
            raise ContractError(f"layer {l}: {len(keep)} experts retained, fewer than top_k={cfg.top_k}")
        if sorted(set(keep)) != list(keep) or keep[0] < 0 or keep[-1] >= n:
            raise ContractError(f"layer {l}: retained ids must be ascending, unique and in [0, {n})")
        idx = np.asarray(keep)
        for key in EXPERT_KEYS:
            name = f"layers.{l}.{key}"
            params[name] = np.ascontiguousarray(ckpt.params[name][idx])
        remap.append([ckpt.original_ids(l)[i] for i in keep])
    new_cfg = replace(cfg, experts_per_layer=tuple(len(r) for r in mask.retained))
    meta = dict(ckpt.meta)
    meta["pruned_from"] = ckpt.digest()
    meta["prune"] = dict(mask.provenance)
    return Checkpoint(new_cfg, params, remap, meta)


@dataclass
class EquivalenceReport:
    max_deviation: float
    routed_outside: int  # tokens whose original top-K touched a dropped expert
    clean_tokens: int  # tokens with no dropped expert selected at or before them
    n_tokens: int

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_deviation <= tol


def verify_equivalence(
    original: Checkpoint, pruned: Checkpoint, mask: PruneMask, probes: Sequence[TranslationEpisode | Sequence[int]]
) -> EquivalenceReport:
    """Compare logits of the two models on probe sequences.

    A token counts as routed outside the mask when its original top-K included a
    dropped expert in any layer. Because attention carries such a token's state
    forward, deviation is measured only at positions with no such token at or
    before them in the same sequence.
    """
    seqs = [list(p.tokens) if isinstance(p, TranslationEpisode) else list(p) for p in probes]
    if not seqs:
        raise ValueError("no probes")
    lo, traces = forward_many(original, seqs, capture=True)
    lp, _ = forward_many(pruned, seqs)
    keep = []
    for l, r in enumerate(mask.retained):
        k = np.zeros(original.config.experts_per_layer[l], bool)
        k[r] = True
        keep.append(k)
    max_dev, outside, clean, total = 0.0, 0, 0, 0
    for a, b, tr in zip(lo, lp, traces):
        hit = np.zeros(len(a), bool)
        for l, lr in enumerate(tr.layers):
            hit |= ~keep[l][lr.indices].all(axis=1)
        tainted = np.cumsum(hit) > 0
        outside += int(hit.sum())
        total += len(a)
        ok = ~tainted
        clean += int(ok.sum())
        if ok.any():
            dev = np.abs(a[ok].astype(np.float64) - b[ok].astype(np.float64)).max()
            max_dev = max(max_dev, float(dev))
    return EquivalenceReport(max_dev, outside, clean, total)
