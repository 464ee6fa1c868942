"""Expert importance from captured routing: routing mass, norm-weighted, random, inverted."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ParallelCorpus, TranslationEpisode, episode_with_target
from .model import Checkpoint, ModelConfig, RoutingTrace, forward_many

METHODS = ("routing-mass", "norm-weighted", "random", "inverted-routing-mass")


@dataclass(frozen=True)
class CalibrationSpec:
    directions: tuple[tuple[int, int], ...]
    passage_ids: tuple[int, ...]
    use_generated_target: bool = True
    target_only: bool = False
    split: str = "dev"

    def __post_init__(self):
        object.__setattr__(self, "directions", tuple((int(s), int(t)) for s, t in self.directions))
        object.__setattr__(self, "passage_ids", tuple(int(i) for i in self.passage_ids))
        for s, t in self.directions:
            if s == t:
                raise ValueError(f"invalid direction {s}->{t}")

    def digest(self) -> str:
        blob = json.dumps(
            [self.directions, self.passage_ids, self.use_generated_target, self.target_only, self.split]
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ImportanceTable:
    method: str
    scores: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def experts_per_layer(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.scores)

    def ranking(self, layer: int) -> list[int]:
        """Experts of ``layer`` from most to least important (ties: lower index first)."""
        s = self.scores[layer]
        return sorted(range(len(s)), key=lambda e: (-s[e], e))

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "expert", "score"])
            for l, row in enumerate(self.scores):
                for e, v in enumerate(row):
                    w.writerow([l, e, repr(float(v))])
        side = {"method": self.method, **self.meta}
        path.with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "ImportanceTable":
        path = Path(path)
        rows: dict[int, dict[int, float]] = {}
        with open(path) as fh:
            for r in csv.DictReader(fh):
                rows.setdefault(int(r["layer"]), {})[int(r["expert"])] = float(r["score"])
        scores = [np.array([rows[l][e] for e in sorted(rows[l])]) for l in sorted(rows)]
        side = json.loads(path.with_suffix(".json").read_text())
        method = side.pop("method")
        return cls(method, scores, side)


# --------------------------------------------------------------------------
# calibration episodes


def generate_targets(ckpt: Checkpoint, episodes: Sequence[TranslationEpisode]) -> list[list[int]]:
    """Greedy continuation of each episode's prompt.

    Episodes whose teacher-forced argmax already reproduces the reference are
    answered without decoding: greedy decoding would emit exactly the reference.
    """
    from .evaluation import decode_cap
    from .model import greedy_decode_many

    logits, _ = forward_many(ckpt, [e.tokens[:-1] for e in episodes])
    out: list[list[int] | None] = []
    need = []
    for i, (e, lg) in enumerate(zip(episodes, logits)):
        pred = lg[len(e.prompt) - 1 :].argmax(axis=1)
        if np.array_equal(pred, np.asarray(e.target)):
            out.append(list(e.target))
        else:
            out.append(None)
            need.append(i)
    gens = greedy_decode_many(ckpt, [episodes[i].prompt for i in need], [decode_cap(episodes[i]) for i in need])
    for i, g in zip(need, gens):
        out[i] = g
    return out


def build_calibration_episodes(
    corpus: ParallelCorpus, spec: CalibrationSpec, ckpt: Checkpoint
) -> tuple[list[TranslationEpisode], int]:
    """Frame every (passage, direction) and complete it with the model's own translation.

    A degenerate generation falls back to the reference target; the number of
    fallbacks is returned alongside the episodes.
    """
    from .evaluation import detect_degeneration

    refs = corpus.episodes(spec.split, spec.directions, spec.passage_ids)
    if not refs or not spec.use_generated_target:
        return refs, 0
    gens = generate_targets(ckpt, refs)
    out, fallbacks = [], 0
    for e, g in zip(refs, gens):
        if detect_degeneration(g, corpus.languages[e.tgt], e.source_len) != "ok":
            out.append(e)
            fallbacks += 1
        else:
            out.append(episode_with_target(e.prompt, g[: g.index(2) + 1], e.src, e.tgt, e.passage_id))
    return out, fallbacks


# --------------------------------------------------------------------------
# reductions


class RoutingAccumulator:
    """Sequence-level routing statistics with an order-independent exact reduction.

    Each added sequence contributes its per-layer token-mean vector; the final
    table is the ``math.fsum`` of those vectors divided by the sequence count, so
    any accumulation order or merge grouping gives bit-identical results.
    """

    def __init__(self, experts_per_layer: Sequence[int], norm_weighted: bool = False):
        self.experts_per_layer = tuple(experts_per_layer)
        self.norm_weighted = norm_weighted
        self._seq: list[list[np.ndarray]] = []

    def __len__(self) -> int:
        return len(self._seq)

    def add(self, trace: RoutingTrace, mask: np.ndarray | None = None) -> None:
        rows = []
        for l, lr in enumerate(trace.layers):
            dense = lr.dense_norm_weighted() if self.norm_weighted else lr.dense(self.experts_per_layer[l])
            if mask is not None:
                dense = dense[np.asarray(mask, bool)]
            rows.append(dense.mean(axis=0) if len(dense) else np.zeros(dense.shape[1]))
        self._seq.append(rows)

    def merge(self, other: "RoutingAccumulator") -> "RoutingAccumulator":
        if other.experts_per_layer != self.experts_per_layer or other.norm_weighted != self.norm_weighted:
            raise ValueError("cannot merge accumulators of different shape or method")
        out = RoutingAccumulator(self.experts_per_layer, self.norm_weighted)
        out._seq = self._seq + other._seq
        return out

    def scores(self) -> list[np.ndarray]:
        n = len(self._seq)
        if n == 0:
            raise ValueError("no sequences accumulated")
        out = []
        for l, e in enumerate(self.experts_per_layer):
            cols = np.stack([s[l] for s in self._seq])  # [n, E]
            out.append(np.array([math.fsum(cols[:, j]) / n for j in range(e)]))
        return out


def _capture(ckpt: Checkpoint, episodes: Sequence[TranslationEpisode], norm_weighted: bool, target_only: bool):
    if not episodes:
        raise ValueError("episodes must be nonempty")
    _, traces = forward_many(ckpt, [e.tokens for e in episodes], capture=True)
    acc = RoutingAccumulator(ckpt.config.experts_per_layer, norm_weighted)
    for e, tr in zip(episodes, traces):
        acc.add(tr, np.asarray(e.loss_mask, bool) if target_only else None)
    return acc


def routing_mass(
    episodes: Sequence[TranslationEpisode], ckpt: Checkpoint, target_only: bool = False, meta: dict | None = None
) -> ImportanceTable:
    """Mean routing weight per (layer, expert): token mean per sequence, then sequence mean."""
    acc = _capture(ckpt, episodes, False, target_only)
    return ImportanceTable("routing-mass", acc.scores(), {"n_sequences": len(acc), **(meta or {})})


def norm_weighted(
    episodes: Sequence[TranslationEpisode], ckpt: Checkpoint, target_only: bool = False, meta: dict | None = None
) -> ImportanceTable:
    """Routing weight times the L2 norm of the expert's output, averaged like routing mass."""
    acc = _capture(ckpt, episodes, True, target_only)
    return ImportanceTable("norm-weighted", acc.scores(), {"n_sequences": len(acc), **(meta or {})})


def random_scores(config: ModelConfig, seed: int) -> ImportanceTable:
    rng = np.random.default_rng([seed, 0x5C0])
    return ImportanceTable("random", [rng.uniform(0.0, 1.0, size=e) for e in config.experts_per_layer], {"seed": seed})


def invert(table: ImportanceTable) -> ImportanceTable:
    """Negate scores so the least important expert ranks first."""
    method = table.method[len("inverted-"):] if table.method.startswith("inverted-") else f"inverted-{table.method}"
    return ImportanceTable(method, [-s for s in table.scores], dict(table.meta))


def merge_multilingual(tables: Sequence[ImportanceTable]) -> ImportanceTable:
    """Unweighted per-entry mean across per-language tables."""
    if not tables:
        raise ValueError("nothing to merge")
    first = tables[0]
    for t in tables[1:]:
        if t.method != first.method or t.experts_per_layer != first.experts_per_layer:
            raise ValueError("tables differ in method or expert counts")
    n = len(tables)
    scores = [
        np.array([math.fsum(t.scores[l][e] for t in tables) / n for e in range(len(first.scores[l]))])
        for l in range(len(first.scores))
    ]
    meta = {"merged": n, "n_sequences": sum(t.meta.get("n_sequences", 0) for t in tables)}
    return ImportanceTable(first.method, scores, meta)
