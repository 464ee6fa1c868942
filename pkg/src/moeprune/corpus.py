"""Synthetic n-way parallel translation world.

Every language renders the same concept sequences: a positional transform is
applied, then each concept id goes through a per-language substitution cipher
into that language's private block of token ids.

Token id layout::

    0 PAD, 1 BOS, 2 EOS, 3 SEP
    4 .. 4+n_langs-1            language tags
    4+n_langs + l*V_c ...       block of language l (V_c ids each)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, SEP = 0, 1, 2, 3
N_SPECIAL = 4
TRANSFORMS = ("identity", "reverse", "rotate-left-1")

# Role of each non-pivot language in the default 8-language world.
CALIBRATION_LANGS = (1, 2, 3, 4)
UNSEEN_LANGS = (5, 6)
RESERVED_LANGS = (7,)
DISTILL_LANGS = (1, 2, 3, 4, 7)


@dataclass(frozen=True)
class LanguageSpec:
    lang_id: int
    offset: int
    permutation: tuple[int, ...]
    transform: str

    @property
    def tag(self) -> int:
        return N_SPECIAL + self.lang_id

    @property
    def block(self) -> range:
        return range(self.offset, self.offset + len(self.permutation))

    def to_dict(self) -> dict:
        return {
            "lang_id": self.lang_id,
            "offset": self.offset,
            "permutation": list(self.permutation),
            "transform": self.transform,
        }


@dataclass(frozen=True)
class TranslationEpisode:
    tokens: tuple[int, ...]
    loss_mask: tuple[int, ...]
    src: int
    tgt: int
    passage_id: int = -1

    @property
    def prompt(self) -> tuple[int, ...]:
        """Everything up to and including the target-language tag."""
        return self.tokens[: self.tokens.index(SEP) + 2]

    @property
    def target(self) -> tuple[int, ...]:
        """Target rendering plus EOS."""
        return self.tokens[self.tokens.index(SEP) + 2 :]

    @property
    def source_len(self) -> int:
        return self.tokens.index(SEP) - 2


def block_offset(lang_id: int, n_langs: int, v_c: int) -> int:
    return N_SPECIAL + n_langs + lang_id * v_c


def vocab_size(n_langs: int, v_c: int) -> int:
    return N_SPECIAL + n_langs + n_langs * v_c


def gen_languages(n_langs: int, v_c: int, seed: int) -> list[LanguageSpec]:
    if n_langs < 2 or v_c < 8:
        raise ValueError("need n_langs >= 2 and V_c >= 8")
    rng = np.random.default_rng([seed, 0x1A6])
    langs = [LanguageSpec(0, block_offset(0, n_langs, v_c), tuple(range(v_c)), "identity")]
    for lang in range(1, n_langs):
        perm = tuple(int(i) for i in rng.permutation(v_c))
        transform = TRANSFORMS[int(rng.integers(len(TRANSFORMS)))]
        langs.append(LanguageSpec(lang, block_offset(lang, n_langs, v_c), perm, transform))
    return langs


def _apply_transform(seq: list[int], transform: str) -> list[int]:
    if transform == "identity":
        return list(seq)
    if transform == "reverse":
        return seq[::-1]
    if transform == "rotate-left-1":
        return seq[1:] + seq[:1]
    raise ValueError(f"unknown transform {transform!r}")


def _invert_transform(seq: list[int], transform: str) -> list[int]:
    if transform == "rotate-left-1":
        return seq[-1:] + seq[:-1]
    return _apply_transform(seq, transform)


def render(passage, lang: LanguageSpec) -> list[int]:
    seq = [int(c) for c in passage]
    if any(c < 0 or c >= len(lang.permutation) for c in seq):
        raise ValueError("concept id out of range")
    return [lang.offset + lang.permutation[c] for c in _apply_transform(seq, lang.transform)]


def unrender(tokens, lang: LanguageSpec) -> list[int]:
    inv = {p: c for c, p in enumerate(lang.permutation)}
    return _invert_transform([inv[t - lang.offset] for t in tokens], lang.transform)


def make_episode(passage, src: LanguageSpec, tgt: LanguageSpec, passage_id: int = -1) -> TranslationEpisode:
    if src.lang_id == tgt.lang_id:
        raise ValueError("source and target language must differ")
    s, t = render(passage, src), render(passage, tgt)
    tokens = [BOS, src.tag, *s, SEP, tgt.tag, *t, EOS]
    mask = [0] * (len(s) + 4) + [1] * (len(t) + 1)
    return TranslationEpisode(tuple(tokens), tuple(mask), src.lang_id, tgt.lang_id, passage_id)


def episode_with_target(prompt, target, src: int, tgt: int, passage_id: int = -1) -> TranslationEpisode:
    """Frame a prompt plus an explicit target segment (EOS appended if missing)."""
    target = list(target)
    if not target or target[-1] != EOS:
        target.append(EOS)
    tokens = list(prompt) + target
    mask = [0] * len(prompt) + [1] * len(target)
    return TranslationEpisode(tuple(tokens), tuple(mask), src, tgt, passage_id)


def monolingual(passage, lang: LanguageSpec) -> list[int]:
    """BOS + language tag + rendering; used for routing-divergence profiles."""
    return [BOS, lang.tag, *render(passage, lang)]


@dataclass
class ParallelCorpus:
    n_langs: int
    v_c: int
    seed: int
    languages: list[LanguageSpec]
    train: list[tuple[int, ...]]
    dev: list[tuple[int, ...]]
    devtest: list[tuple[int, ...]]
    l_min: int = 8
    l_max: int = 16
    meta: dict = field(default_factory=dict)

    @property
    def vocab_size(self) -> int:
        return vocab_size(self.n_langs, self.v_c)

    @property
    def max_episode_len(self) -> int:
        return 2 * self.l_max + 5

    def split(self, name: str) -> list[tuple[int, ...]]:
        if name not in ("train", "dev", "devtest"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def episode(self, split: str, i: int, src: int, tgt: int) -> TranslationEpisode:
        return make_episode(self.split(split)[i], self.languages[src], self.languages[tgt], i)

    def episodes(self, split: str, directions, ids=None) -> list[TranslationEpisode]:
        ids = range(len(self.split(split))) if ids is None else ids
        return [self.episode(split, int(i), s, t) for s, t in directions for i in ids]


def default_directions(n_langs: int = 8) -> list[tuple[int, int]]:
    """pivot->X and X->pivot for every non-pivot language."""
    out = [(0, x) for x in range(1, n_langs)]
    out += [(x, 0) for x in range(1, n_langs)]
    return out


def gen_corpus(
    n_langs: int = 8,
    v_c: int = 64,
    sizes: tuple[int, int, int] = (4096, 256, 256),
    seed: int = 0,
    l_min: int = 8,
    l_max: int = 16,
) -> ParallelCorpus:
    if min(sizes) <= 0:
        raise ValueError("split sizes must be positive")
    if not 1 <= l_min <= l_max:
        raise ValueError("need 1 <= l_min <= l_max")
    langs = gen_languages(n_langs, v_c, seed)
    rng = np.random.default_rng([seed, 0xC0])
    seen: set[tuple[int, ...]] = set()
    splits: list[list[tuple[int, ...]]] = []
    for size in sizes:
        out = []
        while len(out) < size:
            n = int(rng.integers(l_min, l_max + 1))
            p = tuple(int(c) for c in rng.integers(0, v_c, size=n))
            if p in seen:
                continue
            seen.add(p)
            out.append(p)
        splits.append(out)
    return ParallelCorpus(n_langs, v_c, seed, langs, *splits, l_min=l_min, l_max=l_max)


# --------------------------------------------------------------------------
# serialization: JSON manifest + little-endian uint32 blob


def save_corpus(corpus: ParallelCorpus, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.json`` and ``<path>.bin``; returns both paths."""
    path = Path(path)
    manifest_path, blob_path = path.with_suffix(".json"), path.with_suffix(".bin")
    chunks, index, offset = [], {}, 0
    for name in ("train", "dev", "devtest"):
        entries = []
        for p in corpus.split(name):
            arr = np.asarray(p, dtype="<u4")
            entries.append([offset, len(p)])
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        index[name] = entries
    blob = b"".join(chunks)
    manifest = {
        "format": "moeprune-corpus/1",
        "n_langs": corpus.n_langs,
        "v_c": corpus.v_c,
        "seed": corpus.seed,
        "l_min": corpus.l_min,
        "l_max": corpus.l_max,
        "sizes": {k: len(v) for k, v in index.items()},
        "languages": [lang.to_dict() for lang in corpus.languages],
        "blob": blob_path.name,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "offsets": index,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    blob_path.write_bytes(blob)
    return manifest_path, blob_path


def load_corpus(path: str | Path) -> ParallelCorpus:
    manifest_path = Path(path).with_suffix(".json")
    m = json.loads(manifest_path.read_text())
    blob = (manifest_path.parent / m["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != m["blob_sha256"]:
        raise ValueError("corpus blob does not match manifest hash")
    ids = np.frombuffer(blob, dtype="<u4")
    splits = {
        name: [tuple(int(c) for c in ids[off // 4 : off // 4 + n]) for off, n in m["offsets"][name]]
        for name in ("train", "dev", "devtest")
    }
    langs = [
        LanguageSpec(d["lang_id"], d["offset"], tuple(d["permutation"]), d["transform"]) for d in m["languages"]
    ]
    return ParallelCorpus(
        m["n_langs"], m["v_c"], m["seed"], langs, splits["train"], splits["dev"], splits["devtest"],
        l_min=m["l_min"], l_max=m["l_max"],
    )
