"""Pretraining and recovery tuning (SFT on dev pairs, sequence-level distillation)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import EOS, ParallelCorpus, TranslationEpisode, default_directions, episode_with_target
from .model import Checkpoint, RoutingTrace, _pad, as_tensors, forward_batch, greedy_decode_many

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    aux_coef: float = 0.01
    clip_norm: float = 1.0
    warmup: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("steps >= 0, batch_size >= 1, lr > 0, clip_norm > 0 required")
        if self.aux_coef < 0 or self.warmup < 0:
            raise ValueError("aux_coef and warmup must be >= 0")


@dataclass
class CurveRow:
    step: int
    task_loss: float
    aux_loss: float
    grad_norm: float


def aux_load_balance(trace: RoutingTrace, layer: int) -> float:
    """``E * sum_e f_e * P_e`` for one layer of a captured trace."""
    lr = trace.layers[layer]
    if lr.indices.shape[0] == 0:
        raise ValueError("empty trace")
    val = nx.load_balance(nx.Tensor(lr.logits.astype(np.float64)), lr.indices)
    return float(val.data)


def batch_loss(params, cfg, episodes: Sequence[TranslationEpisode], aux_coef: float):
    """Masked next-token loss over a padded batch plus ``aux_coef`` x summed balance loss."""
    toks, valid = _pad([e.tokens for e in episodes])
    mask, _ = _pad([e.loss_mask for e in episodes])
    inp, tgt = toks[:, :-1], toks[:, 1:]
    lmask = (mask[:, 1:] > 0) & valid[:, 1:]
    out = forward_batch(params, cfg, inp, valid[:, :-1])
    task = nx.cross_entropy(nx.reshape(out.logits, (-1, cfg.vocab_size)), tgt.reshape(-1), lmask.reshape(-1))
    aux = out.aux[0]
    for a in out.aux[1:]:
        aux = nx.add(aux, a)
    total = nx.add(task, nx.mul(aux, aux_coef)) if aux_coef else task
    return total, task, aux


def flat_loss(ckpt: Checkpoint, episodes: Sequence[TranslationEpisode], aux_coef: float = 0.01):
    """``(fn, x0)``: the training loss as a function of one flat parameter vector.

    Used for whole-model finite-difference checks.
    """
    names = sorted(ckpt.params)
    shapes = [ckpt.params[k].shape for k in names]
    x0 = np.concatenate([ckpt.params[k].ravel() for k in names]).astype(nx.get_dtype())
    bounds = np.cumsum([0] + [int(np.prod(s)) for s in shapes])

    def fn(x):
        params = {
            k: nx.reshape(nx.slice_flat(x, int(a), int(b)), s)
            for k, s, a, b in zip(names, shapes, bounds[:-1], bounds[1:])
        }
        return batch_loss(params, ckpt.config, episodes, aux_coef)[0]

    return fn, x0


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup) / span))


Sampler = Callable[[np.random.Generator, int], list[TranslationEpisode]]


def fit(ckpt: Checkpoint, sampler: Sampler, cfg: TrainConfig) -> tuple[Checkpoint, list[CurveRow]]:
    """Adam on the masked translation loss; returns a new checkpoint and the loss curve."""
    out = ckpt.copy()
    if cfg.steps == 0:
        return out, []
    rng = np.random.default_rng([cfg.seed, 0x7A])
    names = sorted(out.params)
    shapes = [out.params[k].shape for k in names]
    flat = np.concatenate([out.params[k].ravel() for k in names]).astype(np.float32)
    bounds = np.cumsum([0] + [int(np.prod(s)) for s in shapes])
    for k, s, a, b in zip(names, shapes, bounds[:-1], bounds[1:]):
        out.params[k] = flat[a:b].reshape(s)
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    curve = []
    for step in range(cfg.steps):
        batch = sampler(rng, cfg.batch_size)
        params = as_tensors(out, requires_grad=True)
        with nx.Tape() as tape:
            total, task, aux = batch_loss(params, out.config, batch, cfg.aux_coef)
        tape.backward(total)
        grad = np.concatenate([
            (params[k].grad if params[k].grad is not None else np.zeros(s, np.float32)).ravel()
            for k, s in zip(names, shapes)
        ])
        gnorm = float(np.sqrt(np.dot(grad.astype(np.float64), grad.astype(np.float64))))
        if not math.isfinite(float(total.data)) or not math.isfinite(gnorm):
            raise TrainingDivergedError(f"non-finite loss or gradient at step {step}: loss={float(total.data)}")
        grad *= np.float32(min(1.0, cfg.clip_norm / (gnorm + 1e-12)))
        lr = _lr_at(step, cfg)
        t = step + 1
        m *= np.float32(cfg.beta1)
        m += np.float32(1 - cfg.beta1) * grad
        v *= np.float32(cfg.beta2)
        v += np.float32(1 - cfg.beta2) * grad * grad
        denom = np.sqrt(v / np.float32(1 - cfg.beta2**t)) + np.float32(cfg.eps)
        flat -= np.float32(lr / (1 - cfg.beta1**t)) * m / denom
        curve.append(CurveRow(step, float(task.data), float(aux.data), gnorm))
        if step % 250 == 0 or step == cfg.steps - 1:
            log.info("step %d task %.4f aux %.4f |g| %.3f", step, float(task.data), float(aux.data), gnorm)
    out.params = {k: out.params[k].copy() for k in names}
    return out, curve


def train(
    ckpt: Checkpoint,
    corpus: ParallelCorpus,
    directions: Sequence[tuple[int, int]] | None = None,
    cfg: TrainConfig = TrainConfig(),
) -> tuple[Checkpoint, list[CurveRow]]:
    """Pretrain on freshly framed train-split episodes over ``directions``."""
    directions = list(directions or default_directions(corpus.n_langs))
    if not directions:
        raise ValueError("directions must be nonempty")
    n_train = len(corpus.train)

    def sampler(rng, b):
        ids = rng.integers(0, n_train, size=b)
        dirs = rng.integers(0, len(directions), size=b)
        return [corpus.episode("train", int(i), *directions[int(d)]) for i, d in zip(ids, dirs)]

    return fit(ckpt, sampler, cfg)


def _episode_sampler(episodes: Sequence[TranslationEpisode]) -> Sampler:
    episodes = list(episodes)
    if not episodes:
        raise ValueError("no episodes to train on")

    def sampler(rng, b):
        return [episodes[int(i)] for i in rng.integers(0, len(episodes), size=b)]

    return sampler


def sft_recover(
    ckpt: Checkpoint,
    corpus: ParallelCorpus,
    directions: Sequence[tuple[int, int]] | None = None,
    cfg: TrainConfig = TrainConfig(steps=500, lr=1e-3, warmup=20),
) -> Checkpoint:
    """Full-parameter fine-tuning on dev-split pairs (default: pivot->X only)."""
    directions = list(directions or [(0, x) for x in range(1, corpus.n_langs)])
    if cfg.steps == 0:
        return ckpt.copy()
    return fit(ckpt, _episode_sampler(corpus.episodes("dev", directions)), cfg)[0]


@dataclass
class DistillSet:
    episodes: list[TranslationEpisode]
    dropped: int = 0
    teacher: str = ""
    provenance: list[tuple[int, int, int]] = field(default_factory=list)  # (src, tgt, passage id)


def build_distill_set(
    teacher: Checkpoint,
    corpus: ParallelCorpus,
    passage_ids: Sequence[int],
    target_langs: Sequence[int],
    split: str = "train",
) -> DistillSet:
    """Partition pivot passages round-robin over ``target_langs``; label with teacher greedy output.

    Passages on which the teacher degenerates are dropped and counted.
    """
    from .evaluation import detect_degeneration, decode_cap

    target_langs = list(target_langs)
    if not passage_ids:
        return DistillSet([], 0, teacher.digest())
    jobs = [(int(pid), target_langs[j % len(target_langs)]) for j, pid in enumerate(passage_ids)]
    eps = [corpus.episode(split, pid, 0, t) for pid, t in jobs]
    gens = greedy_decode_many(teacher, [e.prompt for e in eps], [decode_cap(e) for e in eps])
    out, dropped, prov = [], 0, []
    for (pid, t), e, g in zip(jobs, eps, gens):
        if detect_degeneration(g, corpus.languages[t], e.source_len) != "ok":
            dropped += 1
            continue
        out.append(episode_with_target(e.prompt, g, 0, t, pid))
        prov.append((0, t, pid))
    return DistillSet(out, dropped, teacher.digest(), prov)


def distill_recover(
    ckpt: Checkpoint,
    distill: DistillSet,
    cfg: TrainConfig = TrainConfig(steps=1000, lr=1e-3, warmup=20),
) -> Checkpoint:
    """Full-parameter fine-tuning on teacher-generated targets."""
    if cfg.steps == 0:
        return ckpt.copy()
    return fit(ckpt, _episode_sampler(distill.episodes), cfg)[0]


def write_curve(curve: Sequence[CurveRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "task_loss", "aux_loss", "grad_norm"])
        for r in curve:
            w.writerow([r.step, repr(r.task_loss), repr(r.aux_loss), repr(r.grad_norm)])


@dataclass(frozen=True)
class ParentRecipe:
    """Two-stage pretraining: pivot->X only, then every default direction.

    Training all fourteen directions from scratch stalls on a plateau where the
    model ignores the target tag; the short pivot->X stage gets past it. The
    larger main-stage batch removes most residual position slips on the
    rotated X->pivot directions.
    """

    warm: TrainConfig = TrainConfig(steps=1500)
    main: TrainConfig = TrainConfig(steps=2500, batch_size=64, seed=1)

    def with_overrides(self, **changes) -> "ParentRecipe":
        """Apply ``steps``/``lr``/... to the main stage; ``warm_steps`` and ``seed`` to both."""
        warm_steps = changes.pop("warm_steps", None)
        seed = changes.pop("seed", None)
        warm, main = self.warm, replace(self.main, **changes)
        if warm_steps is not None:
            warm = replace(warm, steps=warm_steps)
        if seed is not None:
            warm, main = replace(warm, seed=seed), replace(main, seed=seed + 1)
        if "aux_coef" in changes:
            warm = replace(warm, aux_coef=changes["aux_coef"])
        return ParentRecipe(warm, main)


PARENT_RECIPE = ParentRecipe()


def train_parent(
    ckpt: Checkpoint, corpus: ParallelCorpus, recipe: ParentRecipe = PARENT_RECIPE
) -> tuple[Checkpoint, list[CurveRow]]:
    """Run both stages; the returned curve numbers steps continuously across them."""
    warm_dirs = [(0, x) for x in range(1, corpus.n_langs)]
    ckpt, c1 = train(ckpt, corpus, warm_dirs, recipe.warm)
    ckpt, c2 = train(ckpt, corpus, None, recipe.main)
    off = len(c1)
    return ckpt, c1 + [replace(r, step=r.step + off) for r in c2]
