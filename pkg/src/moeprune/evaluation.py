"""Translation-quality measurement and pruning sweeps.

Exact match is decided by greedy decoding. A teacher-forced pass is run first:
when the argmax at every target position already reproduces the reference
(and its EOS), greedy decoding is guaranteed to emit exactly the reference, so
only the remaining episodes are actually decoded.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import EOS, LanguageSpec, ParallelCorpus, TranslationEpisode
from .model import Checkpoint, forward_many, greedy_decode_many

log = logging.getLogger(__name__)

ERROR_KINDS = ("no-eos", "off-target-vocab")
OFF_VOCAB_LIMIT = 0.20


def decode_cap(episode: TranslationEpisode) -> int:
    return 2 * episode.source_len + 8


def detect_degeneration(generated: Sequence[int], target: LanguageSpec, source_len: int) -> str:
    """``"ok"``, ``"no-eos"`` or ``"off-target-vocab"`` for one generated continuation.

    These are toy stand-ins for the malformed-output failures of large models.
    """
    cap = 2 * source_len + 8
    gen = list(generated[:cap])
    if EOS not in gen:
        return "no-eos"
    emitted = gen[: gen.index(EOS) + 1]
    block = target.block
    off = sum(1 for t in emitted if t != EOS and t not in block)
    if off > OFF_VOCAB_LIMIT * len(emitted):
        return "off-target-vocab"
    return "ok"


@dataclass(frozen=True)
class EpisodeScore:
    correct: int  # teacher-forced argmax hits over target positions
    total: int
    exact: bool
    error: str  # "ok" or an error kind


def score_episodes(ckpt: Checkpoint, episodes: Sequence[TranslationEpisode], languages) -> list[EpisodeScore]:
    """Per-episode teacher-forced accuracy, greedy exact match and degeneration status."""
    if not episodes:
        return []
    logits, _ = forward_many(ckpt, [e.tokens[:-1] for e in episodes])
    tf = []
    for e, lg in zip(episodes, logits):
        start = len(e.prompt) - 1
        pred = lg[start:].argmax(axis=1)
        ref = np.asarray(e.target)
        tf.append((int((pred == ref).sum()), len(ref)))
    need = [i for i, (c, n) in enumerate(tf) if c < n]
    gens = greedy_decode_many(ckpt, [episodes[i].prompt for i in need], [decode_cap(episodes[i]) for i in need])
    decoded = dict(zip(need, gens))
    out = []
    for i, (e, (c, n)) in enumerate(zip(episodes, tf)):
        if i not in decoded:
            out.append(EpisodeScore(c, n, True, "ok"))
            continue
        g = decoded[i]
        err = detect_degeneration(g, languages[e.tgt], e.source_len)
        exact = err == "ok" and tuple(g) == e.target
        out.append(EpisodeScore(c, n, exact, err))
    return out


@dataclass(frozen=True)
class EvalResult:
    direction: tuple[int, int]
    token_acc: float
    exact_match: float
    error_rate: float
    errors: dict
    seed: int
    n: int

    def row(self) -> dict:
        d = asdict(self)
        d["direction"] = f"{self.direction[0]}->{self.direction[1]}"
        return d


def subset_ids(split_size: int, subset_size: int, seed: int) -> list[int]:
    """Reproducible evaluation subset of a split."""
    if subset_size > split_size:
        raise ValueError(f"subset size {subset_size} exceeds split size {split_size}")
    rng = np.random.default_rng([seed, 0xE7A1])
    return sorted(int(i) for i in rng.choice(split_size, size=subset_size, replace=False))


def summarize(direction, scores: Sequence[EpisodeScore], seed: int) -> EvalResult:
    n = len(scores)
    errs = {k: sum(s.error == k for s in scores) for k in ERROR_KINDS}
    correct = sum(s.correct for s in scores)
    total = sum(s.total for s in scores)
    return EvalResult(
        tuple(direction),
        correct / total if total else 0.0,
        sum(s.exact for s in scores) / n if n else 0.0,
        sum(errs.values()) / n if n else 0.0,
        errs,
        seed,
        n,
    )


def evaluate(
    ckpt: Checkpoint,
    corpus: ParallelCorpus,
    direction: tuple[int, int],
    split: str = "devtest",
    subset_size: int = 128,
    seed: int = 0,
) -> EvalResult:
    ids = subset_ids(len(corpus.split(split)), subset_size, seed)
    eps = corpus.episodes(split, [direction], ids)
    return summarize(direction, score_episodes(ckpt, eps, corpus.languages), seed)


class ScoreCache:
    """Scores a whole split once per (model, direction); seed subsets then index into it."""

    def __init__(self, corpus: ParallelCorpus, split: str = "devtest"):
        self.corpus = corpus
        self.split = split
        self._cache: dict[tuple[str, tuple[int, int]], list[EpisodeScore]] = {}

    def scores(self, ckpt: Checkpoint, direction: tuple[int, int], key: str | None = None) -> list[EpisodeScore]:
        key = (key or ckpt.digest(), tuple(direction))
        if key not in self._cache:
            eps = self.corpus.episodes(self.split, [direction])
            self._cache[key] = score_episodes(ckpt, eps, self.corpus.languages)
        return self._cache[key]

    def evaluate(self, ckpt, direction, subset_size: int, seed: int, key: str | None = None) -> EvalResult:
        all_scores = self.scores(ckpt, direction, key)
        ids = subset_ids(len(all_scores), subset_size, seed)
        return summarize(direction, [all_scores[i] for i in ids], seed)


# --------------------------------------------------------------------------
# pruning sweeps

SWEEP_COLUMNS = (
    "k", "pct_dropped", "importance_method", "allocation_method", "direction", "seed",
    "token_acc", "exact_match", "error_rate", "err_no_eos", "err_off_vocab",
)
DEFAULT_GRID = (0, 2, 4, 6, 8, 10, 12, 14)


@dataclass(frozen=True)
class Calibration:
    """Which languages and which side of the pivot the importance statistics come from.

    ``mode`` is ``"pivot-x"`` (pivot->X episodes) or ``"x-pivot"``. Per-language
    tables are merged with an unweighted mean; the divergence profile is the mean
    of the per-language profiles.
    """

    langs: tuple[int, ...] = (1, 2, 3, 4)
    mode: str = "pivot-x"
    split: str = "dev"
    n_passages: int | None = None
    use_generated_target: bool = True
    target_only: bool = False

    def __post_init__(self):
        if self.mode not in ("pivot-x", "x-pivot"):
            raise ValueError(f"unknown calibration mode {self.mode!r}")
        if not self.langs or 0 in self.langs:
            raise ValueError("calibration languages must be nonempty and exclude the pivot")
        object.__setattr__(self, "langs", tuple(int(x) for x in self.langs))

    def direction(self, lang: int) -> tuple[int, int]:
        return (0, lang) if self.mode == "pivot-x" else (lang, 0)

    def spec(self, corpus: ParallelCorpus, lang: int):
        from .importance import CalibrationSpec

        n = len(corpus.split(self.split)) if self.n_passages is None else self.n_passages
        return CalibrationSpec(
            (self.direction(lang),), tuple(range(n)), self.use_generated_target, self.target_only, self.split
        )

    def to_dict(self) -> dict:
        return asdict(self)


class Pruner:
    """Caches calibration tables and divergence profiles for one parent model.

    ``plan_mask`` turns (importance method, allocation method, k, seed) into a
    capacity plan and prune mask; the random importance draws a fresh table per seed.
    """

    def __init__(self, parent: Checkpoint, corpus: ParallelCorpus, calibration: Calibration = Calibration()):
        self.parent = parent
        self.corpus = corpus
        self.calibration = calibration
        self._tables: dict = {}
        self._profiles: dict = {}
        self.fallbacks: dict[int, int] = {}

    def lang_table(self, method: str, lang: int):
        from . import importance as imp

        key = (method, lang)
        if key not in self._tables:
            spec = self.calibration.spec(self.corpus, lang)
            eps, fb = imp.build_calibration_episodes(self.corpus, spec, self.parent)
            self.fallbacks[lang] = fb
            fn = imp.norm_weighted if method == "norm-weighted" else imp.routing_mass
            meta = {"spec_hash": spec.digest(), "fallbacks": fb, "lang": lang}
            self._tables[key] = fn(eps, self.parent, spec.target_only, meta)
        return self._tables[key]

    def table(self, method: str, seed: int = 0, lang: int | None = None):
        from . import importance as imp

        if method == "random":
            return imp.random_scores(self.parent.config, seed)
        base = method[len("inverted-"):] if method.startswith("inverted-") else method
        if base not in ("routing-mass", "norm-weighted"):
            raise ValueError(f"unknown importance method {method!r}")
        langs = self.calibration.langs if lang is None else (lang,)
        t = imp.merge_multilingual([self.lang_table(base, x) for x in langs])
        return imp.invert(t) if method.startswith("inverted-") else t

    def profile(self, lang: int | None = None):
        from .allocation import divergence_profile, mean_profile

        langs = self.calibration.langs if lang is None else (lang,)
        for x in langs:
            if x not in self._profiles:
                self._profiles[x] = divergence_profile(self.parent, self.corpus, x, self.calibration.split)
        return mean_profile([self._profiles[x] for x in langs])

    def plan_mask(self, importance: str, allocation: str, k: int, seed: int = 0, lang: int | None = None):
        from .allocation import allocate
        from .surgeon import build_mask

        table = self.table(importance, seed, lang)
        prof = None if allocation == "uniform" else self.profile(lang)
        plan = allocate(allocation, self.parent.config, k, prof)
        prov = {"calibration": self.calibration.to_dict(), "seed": seed, "lang": lang}
        return plan, build_mask(table, plan, self.parent, prov)

    def prune(self, importance: str, allocation: str, k: int, seed: int = 0, lang: int | None = None):
        from .surgeon import extract

        plan, mask = self.plan_mask(importance, allocation, k, seed, lang)
        return extract(self.parent, mask), plan, mask


@dataclass
class SweepRow:
    k: int
    pct_dropped: float
    importance_method: str
    allocation_method: str
    direction: tuple[int, int]
    seed: int
    token_acc: float
    exact_match: float
    error_rate: float
    err_no_eos: int
    err_off_vocab: int
    error: str = ""

    def cells(self) -> list:
        d = asdict(self)
        d["direction"] = f"{self.direction[0]}->{self.direction[1]}"
        return [d[c] if not isinstance(d[c], float) else repr(d[c]) for c in SWEEP_COLUMNS]


@dataclass
class SweepReport:
    rows: list[SweepRow]
    meta: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_COLUMNS)
            for r in self.rows:
                w.writerow(r.cells())

    @classmethod
    def from_csv(cls, path: str | Path) -> "SweepReport":
        rows = []
        with open(path) as fh:
            for r in csv.DictReader(fh):
                s, t = r["direction"].split("->")
                rows.append(SweepRow(
                    int(r["k"]), float(r["pct_dropped"]), r["importance_method"], r["allocation_method"],
                    (int(s), int(t)), int(r["seed"]), float(r["token_acc"]), float(r["exact_match"]),
                    float(r["error_rate"]), int(r["err_no_eos"]), int(r["err_off_vocab"])))
        return cls(rows)

    def select(self, **kw) -> list[SweepRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in kw.items())]

    def mean_exact(self, k: int, seed: int, directions=None, **kw) -> float:
        rows = [r for r in self.select(k=k, seed=seed, **kw) if directions is None or r.direction in directions]
        return float(np.mean([r.exact_match for r in rows])) if rows else float("nan")

    @property
    def grid(self) -> tuple[int, ...]:
        return tuple(sorted({r.k for r in self.rows}))


def sweep(
    ckpt: Checkpoint,
    corpus: ParallelCorpus,
    importance: str,
    allocation: str,
    k_grid: Iterable[int] = DEFAULT_GRID,
    directions: Sequence[tuple[int, int]] | None = None,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    calibration: Calibration = Calibration(),
    subset_size: int = 128,
    pruner: Pruner | None = None,
    cache: ScoreCache | None = None,
) -> SweepReport:
    """Prune at every grid point and evaluate every direction and seed.

    Rows come out in (k, seed, direction) order. A failing stage is recorded on
    its rows (NaN metrics, message in ``error``) and the sweep carries on.
    """
    from .corpus import default_directions

    E = max(ckpt.config.experts_per_layer)
    grid = list(k_grid)
    if any(not 0 <= k <= E - ckpt.config.top_k for k in grid):
        raise ValueError(f"grid {grid} outside [0, {E - ckpt.config.top_k}]")
    directions = [tuple(d) for d in (directions or default_directions(corpus.n_langs))]
    pruner = pruner or Pruner(ckpt, corpus, calibration)
    cache = cache or ScoreCache(corpus)
    rows = []
    nan = float("nan")
    for k in grid:
        pct = 100.0 * k / E
        # deterministic methods give one mask for all seeds; random gives one per seed
        per_seed = importance == "random"
        models: dict[int, Checkpoint | str] = {}
        for seed in seeds:
            if not per_seed and models:
                models[seed] = next(iter(models.values()))
                continue
            try:
                models[seed] = ckpt if k == 0 else pruner.prune(importance, allocation, k, seed)[0]
            except Exception as exc:  # recorded per row
                log.warning("k=%d seed=%d: %s", k, seed, exc)
                models[seed] = f"{type(exc).__name__}: {exc}"
        for seed in seeds:
            m = models[seed]
            for d in directions:
                if isinstance(m, str):
                    rows.append(SweepRow(k, pct, importance, allocation, d, seed, nan, nan, nan, 0, 0, m))
                    continue
                r = cache.evaluate(m, d, subset_size, seed)
                rows.append(SweepRow(
                    k, pct, importance, allocation, d, seed, r.token_acc, r.exact_match, r.error_rate,
                    r.errors["no-eos"], r.errors["off-target-vocab"]))
        log.info("sweep %s+%s k=%d done", importance, allocation, k)
    meta = {
        "importance": importance, "allocation": allocation, "grid": grid, "seeds": list(seeds),
        "directions": [list(d) for d in directions], "subset_size": subset_size,
        "calibration": calibration.to_dict(), "parent": ckpt.digest(),
        "errors": sorted({r.error for r in rows if r.error}),
    }
    return SweepReport(rows, meta)


@dataclass
class TransferRow:
    k: int
    direction: tuple[int, int]
    seed: int
    exact_a: float
    exact_b: float

    @property
    def delta(self) -> float:
        return self.exact_a - self.exact_b


def direction_transfer_report(a: SweepReport, b: SweepReport) -> list[TransferRow]:
    """Pair the X->pivot rows of two sweeps (e.g. pivot->X- vs X->pivot-calibrated masks)."""
    if a.grid != b.grid:
        raise ValueError(f"sweep grids differ: {a.grid} vs {b.grid}")
    index = {(r.k, r.direction, r.seed): r for r in b.rows if r.direction[1] == 0}
    out = []
    for r in a.rows:
        if r.direction[1] != 0:
            continue
        other = index.get((r.k, r.direction, r.seed))
        if other is None:
            raise ValueError(f"no matching row for k={r.k} {r.direction} seed={r.seed}")
        out.append(TransferRow(r.k, r.direction, r.seed, r.exact_match, other.exact_match))
    return out


def write_transfer(rows: Sequence[TransferRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "direction", "seed", "exact_a", "exact_b", "delta"])
        for r in rows:
            w.writerow([r.k, f"{r.direction[0]}->{r.direction[1]}", r.seed, repr(r.exact_a), repr(r.exact_b), repr(r.delta)])
