"""Command-line entry point. Every command writes its artifacts plus ``manifest.json``.

Defaults for every option live in ``DEFAULTS``; a ``--config`` file of
``key = value`` lines overrides them and explicit flags override the file.
The only environment variable read is ``MOEPRUNE_OUT`` (default output root).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__

log = logging.getLogger("moeprune")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
MANIFEST = "manifest.json"


class ValidationError(Exception):
    pass


# name -> (default, type, help). Paths are declared with type ``Path`` so they are hashed as inputs.
COMMON = {
    "seed": (0, int, "global seed"),
    "workers": (1, int, "worker count (results do not depend on it)"),
}
DEFAULTS: dict[str, dict[str, tuple]] = {
    "gen-corpus": {
        "n_langs": (8, int, "languages including the pivot"),
        "v_c": (64, int, "concept vocabulary size"),
        "train_size": (4096, int, ""),
        "dev_size": (256, int, ""),
        "devtest_size": (256, int, ""),
        "l_min": (8, int, "shortest passage"),
        "l_max": (16, int, "longest passage"),
    },
    "train": {
        "corpus": (None, Path, "corpus manifest"),
        "n_layers": (6, int, ""),
        "n_experts": (16, int, ""),
        "top_k": (2, int, ""),
        "d_model": (64, int, ""),
        "d_ff": (128, int, ""),
        "steps": (None, int, "all-direction stage; default: the pinned parent recipe"),
        "warm_steps": (None, int, "pivot->X warm-up stage; default: the pinned parent recipe"),
        "batch_size": (None, int, ""),
        "lr": (None, float, ""),
        "warmup": (None, int, ""),
        "aux_coef": (0.01, float, "load-balance coefficient"),
    },
    "calibrate": {
        "model": (None, Path, "parent checkpoint"),
        "corpus": (None, Path, ""),
        "method": ("routing-mass", str, "routing-mass | norm-weighted | random | inverted-routing-mass"),
        "langs": ("1,2,3,4", str, "calibration languages"),
        "mode": ("pivot-x", str, "pivot-x | x-pivot"),
        "n_passages": (None, int, "dev passages per language (default all)"),
        "target_only": (False, bool, "average over target tokens only"),
    },
    "divergence": {
        "model": (None, Path, ""),
        "corpus": (None, Path, ""),
        "langs": ("1,2,3,4,5,6,7", str, ""),
        "split": ("dev", str, ""),
    },
    "allocate": {
        "model": (None, Path, "checkpoint whose config is allocated"),
        "profiles": (None, Path, "divergence CSV (dynamic methods)"),
        "langs": ("1,2,3,4", str, "profiles averaged for dynamic allocation"),
        "method": ("dynamic", str, "uniform | dynamic | inverse-dynamic"),
        "k": (8, int, "experts dropped per layer on average"),
    },
    "prune": {
        "model": (None, Path, ""),
        "importance": (None, Path, "importance CSV"),
        "plan": (None, Path, "plan CSV"),
    },
    "verify": {
        "model": (None, Path, "original checkpoint"),
        "pruned": (None, Path, ""),
        "mask": (None, Path, ""),
        "corpus": (None, Path, ""),
        "probes": (64, int, "probe episodes"),
        "directions": ("0-1,0-2,0-3,0-4", str, "probe directions"),
    },
    "eval": {
        "model": (None, Path, ""),
        "corpus": (None, Path, ""),
        "directions": ("all", str, "comma list of s-t, or all"),
        "subset_size": (128, int, ""),
        "seeds": ("0,1,2,3,4", str, ""),
    },
    "sweep": {
        "model": (None, Path, ""),
        "corpus": (None, Path, ""),
        "importance": ("routing-mass", str, ""),
        "allocation": ("dynamic", str, ""),
        "grid": ("0,2,4,6,8,10,12,14", str, ""),
        "directions": ("all", str, ""),
        "seeds": ("0,1,2,3,4", str, ""),
        "langs": ("1,2,3,4", str, "calibration languages"),
        "mode": ("pivot-x", str, ""),
        "n_passages": (None, int, ""),
        "subset_size": (128, int, ""),
    },
    "sft-recover": {
        "model": (None, Path, "pruned checkpoint"),
        "corpus": (None, Path, ""),
        "steps": (500, int, ""),
        "lr": (1e-3, float, ""),
        "batch_size": (32, int, ""),
    },
    "distill": {
        "model": (None, Path, "pruned student"),
        "teacher": (None, Path, "unpruned parent"),
        "corpus": (None, Path, ""),
        "langs": ("1,2,3,4,7", str, "target languages"),
        "n_passages": (1024, int, "train passages labeled by the teacher"),
        "steps": (1000, int, ""),
        "lr": (1e-3, float, ""),
        "batch_size": (32, int, ""),
    },
    "overlap": {
        "model": (None, Path, ""),
        "corpus": (None, Path, ""),
        "langs": ("1,2,3,4", str, ""),
        "importance": ("routing-mass", str, ""),
        "allocation": ("dynamic", str, ""),
        "grid": ("2,4,6,8,10,12,14", str, ""),
        "trials": (10000, int, "Monte Carlo trials"),
        "n_passages": (None, int, ""),
    },
}


# --------------------------------------------------------------------------
# helpers


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_files(p: Path) -> list[Path]:
    """Files that make up one declared input (a corpus is a manifest plus its blob)."""
    if p.suffix == ".json" and p.with_suffix(".bin").exists():
        return [p, p.with_suffix(".bin")]
    return [p]


def read_config(path: str | Path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _convert(name: str, raw, typ):
    if raw is None:
        return None
    try:
        if typ is bool:
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes"):
                return True
            if str(raw).lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if typ is Path:
            return str(Path(raw).resolve())
        return typ(raw)
    except ValueError:
        raise ValidationError(f"bad value for {name}: {raw!r}") from None


def resolve(command: str, flags: dict, config: dict | None = None) -> dict:
    table = {**COMMON, **DEFAULTS[command]}
    config = config or {}
    unknown = set(config) - set(table)
    if unknown:
        raise ValidationError(f"unknown config keys for {command}: {sorted(unknown)}")
    out = {}
    for name, (default, typ, _) in table.items():
        raw = flags.get(name)
        if raw is None:
            raw = config.get(name, default)
        out[name] = _convert(name, raw, typ)
    for name, (default, typ, _) in table.items():
        if typ is Path and default is None and out[name] is None and name not in ("profiles",):
            raise ValidationError(f"{command}: --{name.replace('_', '-')} is required")
        if typ is Path and out[name] is not None and not Path(out[name]).exists():
            raise ValidationError(f"{command}: input {out[name]} does not exist")
    return out


def _ints(s: str) -> list[int]:
    try:
        return [int(x) for x in str(s).split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {s!r}") from None


def _directions(s: str, n_langs: int) -> list[tuple[int, int]]:
    from .corpus import default_directions

    if s == "all":
        return default_directions(n_langs)
    out = []
    for part in s.split(","):
        try:
            a, b = part.split("-")
            out.append((int(a), int(b)))
        except ValueError:
            raise ValidationError(f"bad direction {part!r}; expected s-t") from None
    return out


# --------------------------------------------------------------------------
# commands; each takes resolved options and an output directory


def cmd_gen_corpus(o, out: Path):
    from .corpus import gen_corpus, save_corpus

    c = gen_corpus(o["n_langs"], o["v_c"], (o["train_size"], o["dev_size"], o["devtest_size"]),
                   o["seed"], o["l_min"], o["l_max"])
    save_corpus(c, out / "corpus.json")


def cmd_train(o, out: Path):
    from .corpus import load_corpus
    from .model import ModelConfig, init_model, save_checkpoint
    from .training import PARENT_RECIPE, train_parent, write_curve

    corpus = load_corpus(o["corpus"])
    cfg = ModelConfig((o["n_experts"],) * o["n_layers"], o["top_k"], o["d_model"], o["d_ff"],
                      corpus.vocab_size, max(64, corpus.max_episode_len), o["seed"])
    changes = {k: o[k] for k in ("steps", "warm_steps", "batch_size", "lr", "warmup") if o[k] is not None}
    recipe = PARENT_RECIPE.with_overrides(**changes, aux_coef=o["aux_coef"], seed=o["seed"])
    ckpt, curve = train_parent(init_model(cfg), corpus, recipe)
    save_checkpoint(ckpt, out / "model.ckpt")
    write_curve(curve, out / "curve.csv")


def _calibration(o):
    from .evaluation import Calibration

    return Calibration(tuple(_ints(o["langs"])), o.get("mode", "pivot-x"), n_passages=o.get("n_passages"),
                       target_only=bool(o.get("target_only", False)))


def cmd_calibrate(o, out: Path):
    from .corpus import load_corpus
    from .evaluation import Pruner
    from .model import load_checkpoint

    pr = Pruner(load_checkpoint(o["model"]), load_corpus(o["corpus"]), _calibration(o))
    table = pr.table(o["method"], o["seed"])
    table.meta.update({"langs": list(pr.calibration.langs), "mode": pr.calibration.mode,
                       "fallbacks": sum(pr.fallbacks.values())})
    table.to_csv(out / "importance.csv")


def cmd_divergence(o, out: Path):
    from .allocation import divergence_profile, write_profiles
    from .corpus import load_corpus
    from .model import load_checkpoint

    ckpt, corpus = load_checkpoint(o["model"]), load_corpus(o["corpus"])
    profiles = [divergence_profile(ckpt, corpus, x, o["split"]) for x in _ints(o["langs"])]
    write_profiles(profiles, out / "divergence.csv")


def cmd_allocate(o, out: Path):
    from .allocation import allocate, mean_profile, read_profiles, write_plans
    from .model import load_checkpoint

    cfg = load_checkpoint(o["model"]).config
    prof = None
    if o["method"] != "uniform":
        if o["profiles"] is None:
            raise ValidationError(f"--profiles is required for {o['method']} allocation")
        langs = set(_ints(o["langs"]))
        chosen = [p for p in read_profiles(o["profiles"]) if p.lang in langs]
        if not chosen:
            raise ValidationError(f"no profiles for languages {sorted(langs)}")
        prof = mean_profile(chosen)
    write_plans([allocate(o["method"], cfg, o["k"], prof)], out / "plan.csv")


def cmd_prune(o, out: Path):
    from .allocation import read_plans
    from .importance import ImportanceTable
    from .model import load_checkpoint, save_checkpoint
    from .surgeon import build_mask, extract

    ckpt = load_checkpoint(o["model"])
    plans = read_plans(o["plan"], max(ckpt.config.experts_per_layer), ckpt.config.top_k)
    if len(plans) != 1:
        raise ValidationError("plan file must hold exactly one plan")
    mask = build_mask(ImportanceTable.from_csv(o["importance"]), plans[0], ckpt)
    mask.to_json(out / "mask.json")
    save_checkpoint(extract(ckpt, mask), out / "pruned.ckpt")


def cmd_verify(o, out: Path):
    from .corpus import load_corpus
    from .model import load_checkpoint
    from .surgeon import PruneMask, verify_equivalence

    corpus = load_corpus(o["corpus"])
    dirs = _directions(o["directions"], corpus.n_langs)
    eps = corpus.episodes("devtest", dirs)[: o["probes"]]
    rep = verify_equivalence(load_checkpoint(o["model"]), load_checkpoint(o["pruned"]),
                             PruneMask.from_json(o["mask"]), eps)
    (out / "verify.json").write_text(json.dumps(rep.__dict__, indent=1, sort_keys=True) + "\n")
    print(f"max deviation {rep.max_deviation:.3e} over {rep.clean_tokens} clean tokens; "
          f"{rep.routed_outside} tokens routed outside the mask")


def cmd_eval(o, out: Path):
    import csv

    from .corpus import load_corpus
    from .evaluation import ScoreCache
    from .model import load_checkpoint

    ckpt, corpus = load_checkpoint(o["model"]), load_corpus(o["corpus"])
    cache = ScoreCache(corpus)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["direction", "seed", "n", "token_acc", "exact_match", "error_rate", "err_no_eos", "err_off_vocab"])
        for d in _directions(o["directions"], corpus.n_langs):
            for s in _ints(o["seeds"]):
                r = cache.evaluate(ckpt, d, o["subset_size"], s)
                w.writerow([f"{d[0]}->{d[1]}", s, r.n, repr(r.token_acc), repr(r.exact_match), repr(r.error_rate),
                            r.errors["no-eos"], r.errors["off-target-vocab"]])


def cmd_sweep(o, out: Path):
    from .corpus import load_corpus
    from .evaluation import sweep
    from .model import load_checkpoint

    ckpt, corpus = load_checkpoint(o["model"]), load_corpus(o["corpus"])
    rep = sweep(ckpt, corpus, o["importance"], o["allocation"], _ints(o["grid"]),
                _directions(o["directions"], corpus.n_langs), _ints(o["seeds"]), _calibration(o), o["subset_size"])
    rep.to_csv(out / "sweep.csv")
    (out / "sweep.json").write_text(json.dumps(rep.meta, indent=1, sort_keys=True) + "\n")


def cmd_sft_recover(o, out: Path):
    from .corpus import load_corpus
    from .model import load_checkpoint, save_checkpoint
    from .training import TrainConfig, sft_recover

    cfg = TrainConfig(steps=o["steps"], lr=o["lr"], batch_size=o["batch_size"], warmup=20, seed=o["seed"])
    save_checkpoint(sft_recover(load_checkpoint(o["model"]), load_corpus(o["corpus"]), None, cfg),
                    out / "model.ckpt")


def cmd_distill(o, out: Path):
    from .corpus import load_corpus
    from .model import load_checkpoint, save_checkpoint
    from .training import TrainConfig, build_distill_set, distill_recover

    corpus = load_corpus(o["corpus"])
    n = min(o["n_passages"], len(corpus.train))
    ds = build_distill_set(load_checkpoint(o["teacher"]), corpus, list(range(n)), _ints(o["langs"]))
    cfg = TrainConfig(steps=o["steps"], lr=o["lr"], batch_size=o["batch_size"], warmup=20, seed=o["seed"])
    save_checkpoint(distill_recover(load_checkpoint(o["model"]), ds, cfg), out / "model.ckpt")
    (out / "distill.json").write_text(json.dumps(
        {"episodes": len(ds.episodes), "dropped": ds.dropped, "teacher": ds.teacher}, indent=1, sort_keys=True) + "\n")


def cmd_overlap(o, out: Path):
    from .analysis import OverlapReport, monte_carlo_iou, overlap_row, write_layer_sets
    from .corpus import load_corpus
    from .evaluation import Pruner
    from .model import load_checkpoint

    pr = Pruner(load_checkpoint(o["model"]), load_corpus(o["corpus"]), _calibration(o))
    langs = pr.calibration.langs
    rows, sets, mc = [], {}, []
    for k in _ints(o["grid"]):
        got = [pr.plan_mask(o["importance"], o["allocation"], k, o["seed"], lang=x) for x in langs]
        plans, masks = [g[0] for g in got], [g[1] for g in got]
        rows.append(overlap_row(masks, plans))
        sets.update({f"k{k}-lang{x}": m for x, m in zip(langs, masks)})
        m = monte_carlo_iou(plans, o["trials"], o["seed"])
        mc.append({"k": k, **m.__dict__})
    OverlapReport(rows).to_csv(out / "overlap.csv")
    write_layer_sets(sets, out / "layer_sets.csv")
    (out / "monte_carlo.json").write_text(json.dumps(mc, indent=1, sort_keys=True) + "\n")


COMMANDS: dict[str, Callable] = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "divergence": cmd_divergence,
    "allocate": cmd_allocate,
    "prune": cmd_prune,
    "verify": cmd_verify,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "sft-recover": cmd_sft_recover,
    "distill": cmd_distill,
    "overlap": cmd_overlap,
}


# --------------------------------------------------------------------------
# manifests


def _output_hashes(out: Path) -> dict[str, str]:
    return {
        str(p.relative_to(out)): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != MANIFEST
    }


def execute(command: str, options: dict, out: Path, config_path: str | None = None) -> dict:
    """Run one resolved command into ``out`` and write its manifest."""
    inputs = {}
    for name, (_, typ, _) in {**COMMON, **DEFAULTS[command]}.items():
        if typ is Path and options.get(name):
            for f in _input_files(Path(options[name])):
                inputs[str(f)] = sha256_file(f)
    out.mkdir(parents=True, exist_ok=True)
    np.random.seed(options["seed"])  # nothing should draw from it; pinned anyway
    COMMANDS[command](options, out)
    manifest = {
        "command": command,
        "config": config_path,
        "options": options,
        "inputs": inputs,
        "output_dir": str(out),
        "seed": options["seed"],
        "version": __version__,
        "outputs": _output_hashes(out),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def replay(run_dir: str | Path) -> tuple[bool, list[str]]:
    """Re-run a manifest into a scratch directory and compare output hashes."""
    m = json.loads((Path(run_dir) / MANIFEST).read_text())
    for path, digest in m["inputs"].items():
        if not Path(path).exists():
            raise ValidationError(f"declared input {path} is missing")
        if sha256_file(path) != digest:
            raise ValidationError(f"declared input {path} changed since the run (hash mismatch)")
    tmp = Path(tempfile.mkdtemp(prefix="moeprune-replay-"))
    try:
        got = execute(m["command"], m["options"], tmp, m.get("config"))["outputs"]
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    want = m["outputs"]
    diffs = [f"{k}: {want.get(k)} != {got.get(k)}" for k in sorted(set(want) | set(got)) if want.get(k) != got.get(k)]
    return not diffs, diffs


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moeprune", description="MoE expert-pruning lab on a synthetic translation world.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, table in DEFAULTS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value file; flags override it")
        sp.add_argument("--out", help="output directory (default $MOEPRUNE_OUT/<command> or runs/<command>)")
        for opt, (default, typ, help_) in {**COMMON, **table}.items():
            flag = "--" + opt.replace("_", "-")
            if typ is bool:
                sp.add_argument(flag, dest=opt, action="store_const", const=True, default=None, help=help_)
            else:
                sp.add_argument(flag, dest=opt, default=None, help=f"{help_} (default {default})".strip())
    rp = sub.add_parser("replay", help="re-run a manifest and check outputs are byte-identical")
    rp.add_argument("run_dir")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "replay":
            ok, diffs = replay(args.run_dir)
            for d in diffs:
                print(f"mismatch {d}", file=sys.stderr)
            print("replay: identical" if ok else "replay: outputs differ")
            return EXIT_OK if ok else EXIT_FAILED
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "out", "verbose")}
        config = read_config(args.config) if args.config else {}
        options = resolve(args.command, flags, config)
        root = Path(os.environ.get("MOEPRUNE_OUT", "runs"))
        out = Path(args.out) if args.out else root / args.command
        execute(args.command, options, out.resolve(), str(Path(args.config).resolve()) if args.config else None)
        print(f"wrote {out}")
        return EXIT_OK
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
