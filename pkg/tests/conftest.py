import numpy as np
import pytest

from moeprune import numerics as nx
from moeprune.corpus import gen_corpus
from moeprune.model import ModelConfig, init_model


_VERDICTS: dict[int, str] = {}


def record(n: int, name: str, passed: bool, detail: str) -> None:
    """Store the one-line verdict of an acceptance criterion."""
    _VERDICTS[n] = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])


@pytest.fixture
def f64():
    with nx.precision("f64"):
        yield


@pytest.fixture(scope="session")
def tiny_corpus():
    return gen_corpus(4, 8, (64, 16, 16), seed=3, l_min=3, l_max=6)


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus):
    cfg = ModelConfig.uniform(2, 6, top_k=2, d_model=16, d_ff=24, vocab_size=tiny_corpus.vocab_size, max_seq_len=24)
    ck = init_model(cfg, 5)
    # a little spread so routing is not driven by near-ties
    rng = np.random.default_rng(11)
    for k, v in ck.params.items():
        if "router" in k:
            ck.params[k] = (v + 0.5 * rng.standard_normal(v.shape)).astype(np.float32)
    return ck


# --------------------------------------------------------------------------
# the default parent: trained once with the pinned recipe, then cached

_PARENT_SOURCES = ("numerics.py", "model.py", "training.py", "corpus.py")


def parent_cache_key() -> str:
    import hashlib
    import json
    from pathlib import Path

    import moeprune
    from moeprune.training import PARENT_RECIPE

    h = hashlib.sha256()
    h.update(repr(PARENT_RECIPE).encode())
    h.update(json.dumps(ModelConfig(vocab_size=gen_corpus().vocab_size).to_dict(), sort_keys=True).encode())
    root = Path(moeprune.__file__).parent
    for name in _PARENT_SOURCES:
        h.update((root / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def default_corpus():
    return gen_corpus()


@pytest.fixture(scope="session")
def parent(request, default_corpus):
    from moeprune.model import load_checkpoint, save_checkpoint
    from moeprune.training import train_parent

    path = request.config.cache.mkdir("moeprune-parent") / f"{parent_cache_key()}.ckpt"
    if path.exists():
        return load_checkpoint(path)
    ck, _ = train_parent(init_model(ModelConfig(vocab_size=default_corpus.vocab_size)), default_corpus)
    save_checkpoint(ck, path)
    return ck
