"""Toy MoE decoder: embeddings, L x (attention + sparse MoE FFN), output head."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .corpus import EOS, PAD, SEP
from .numerics import ContractError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    experts_per_layer: tuple[int, ...] = (16,) * 6
    top_k: int = 2
    d_model: int = 64
    d_ff: int = 128
    vocab_size: int = 524
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "experts_per_layer", tuple(int(e) for e in self.experts_per_layer))
        if self.top_k < 1:
            raise ContractError("top_k must be >= 1")
        if not self.experts_per_layer:
            raise ContractError("need at least one layer")
        if min(self.experts_per_layer) < self.top_k:
            raise ContractError(f"every layer needs >= top_k={self.top_k} experts: {self.experts_per_layer}")
        if min(self.d_model, self.d_ff, self.vocab_size, self.max_seq_len) < 1:
            raise ContractError("dimensions must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.experts_per_layer)

    @classmethod
    def uniform(cls, n_layers: int = 6, n_experts: int = 16, **kw) -> "ModelConfig":
        return cls(experts_per_layer=(n_experts,) * n_layers, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["experts_per_layer"] = list(self.experts_per_layer)
        return d


def expert_param_count(cfg: ModelConfig, n_experts: int) -> int:
    d, f = cfg.d_model, cfg.d_ff
    return n_experts * (2 * d * f + f + d)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg``."""
    d, v = cfg.d_model, cfg.vocab_size
    total = v * d + 2 * cfg.max_seq_len * d + d + d * v
    for e in cfg.experts_per_layer:
        total += 2 * d + 4 * d * d + e * (d + 1) + expert_param_count(cfg, e)
    return total


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d), "pos": (cfg.max_seq_len, d),
                                          "pos_back": (cfg.max_seq_len, d)}
    for l, e in enumerate(cfg.experts_per_layer):
        p = f"layers.{l}."
        shapes[p + "attn_norm"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (d, d)
        shapes[p + "moe_norm"] = (d,)
        shapes[p + "router.weight"] = (e, d)
        shapes[p + "router.bias"] = (e,)
        shapes[p + "experts.up"] = (e, d, f)
        shapes[p + "experts.up_bias"] = (e, f)
        shapes[p + "experts.down"] = (e, f, d)
        shapes[p + "experts.down_bias"] = (e, d)
    shapes["final_norm"] = (d,)
    shapes["head"] = (d, v)
    return shapes


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    # per layer: original expert id of each retained slot (None = unpruned)
    remap: list[list[int]] | None = None
    meta: dict = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        remap = None if self.remap is None else [list(r) for r in self.remap]
        return Checkpoint(self.config, {k: v.copy() for k, v in self.params.items()}, remap, dict(self.meta))

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def n_expert_params(self) -> int:
        return int(sum(v.size for k, v in self.params.items() if ".experts." in k))

    def original_ids(self, layer: int) -> list[int]:
        if self.remap is None:
            return list(range(self.config.experts_per_layer[layer]))
        return list(self.remap[layer])

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype="<f4").tobytes())
        h.update(json.dumps(self.remap).encode())
        return h.hexdigest()

    def equals(self, other: "Checkpoint") -> bool:
        """Bit-exact parameter and config equality (remap ignored)."""
        return (
            self.config == other.config
            and self.params.keys() == other.params.keys()
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )


def init_model(config: ModelConfig, seed: int | None = None) -> Checkpoint:
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0x3D])
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            arr = np.ones(shape)
        elif leaf.endswith("bias"):
            arr = np.zeros(shape)
        else:
            # fan-in is the contracted (second-to-last) axis; rows of tables are vectors of width d
            fan_in = shape[-1] if name in ("embed", "pos", "pos_back") or leaf == "weight" else shape[-2]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(np.float32)
    return Checkpoint(config, params)


# --------------------------------------------------------------------------
# routing capture


@dataclass
class LayerRouting:
    indices: np.ndarray  # [t, K]
    weights: np.ndarray  # [t, K]
    norms: np.ndarray  # [t, K]
    logits: np.ndarray  # [t, E_l]

    def dense(self, n_experts: int | None = None) -> np.ndarray:
        """Per-token routing weight over all experts, zero where unselected: [t, E]."""
        n_experts = self.logits.shape[1] if n_experts is None else n_experts
        out = np.zeros((self.indices.shape[0], n_experts), dtype=np.float64)
        np.put_along_axis(out, self.indices, self.weights.astype(np.float64), axis=1)
        return out

    def dense_norm_weighted(self) -> np.ndarray:
        out = np.zeros(self.logits.shape, dtype=np.float64)
        np.put_along_axis(out, self.indices, (self.weights * self.norms).astype(np.float64), axis=1)
        return out


@dataclass
class RoutingTrace:
    layers: list[LayerRouting]

    @property
    def n_tokens(self) -> int:
        return self.layers[0].indices.shape[0] if self.layers else 0

    def token_mean(self, layer: int) -> np.ndarray:
        """Routing-mass distribution of one layer averaged over this sequence's tokens."""
        return self.layers[layer].dense().mean(axis=0)


# --------------------------------------------------------------------------
# forward


def as_tensors(ckpt: Checkpoint, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in ckpt.params.items()}


@dataclass
class ForwardOutput:
    logits: Tensor  # [B, T, V]
    aux: list[Tensor]  # per-layer load-balance loss
    dispatches: list[nx.Dispatch]  # per layer, over flattened B*T rows
    router_logits: list[np.ndarray]


def position_ids(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices into the two learned position tables.

    Forward ids are absolute up to the first SEP, then restart so the target tag
    gets 1 like the source tag. Countdown ids are 0 up to and including SEP; after
    it they count down the source length still to be emitted, clipped at 1. Both
    depend only on a token's prefix.
    """
    tokens = np.atleast_2d(tokens)
    b, t = tokens.shape
    pos = np.broadcast_to(np.arange(t), (b, t)).copy()
    is_sep = tokens == SEP
    first = np.where(is_sep.any(axis=1), is_sep.argmax(axis=1), t)[:, None]
    after = pos > first
    off = pos - first
    pos[after] = off[after]
    back = np.zeros_like(pos)
    n_src = first - 2
    back[after] = np.clip(n_src + 3 - off, 1, t + 2)[after]
    return pos, back


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), -1e9), k=1)


def moe_forward(h: Tensor, layer: int, params: dict[str, Tensor], cfg: ModelConfig):
    """Sparse MoE FFN on a [t, d] (normalized) hidden matrix.

    Returns the mixed expert output (the caller adds it to the residual stream),
    the raw router logits tensor, and the dispatch record.
    """
    if not 0 <= layer < cfg.n_layers:
        raise ContractError(f"layer {layer} out of range")
    p = f"layers.{layer}."
    logits = nx.add(nx.matmul(h, nx.transpose(params[p + "router.weight"])), params[p + "router.bias"])
    out, disp = nx.moe_dispatch(
        h, logits,
        params[p + "experts.up"], params[p + "experts.up_bias"],
        params[p + "experts.down"], params[p + "experts.down_bias"],
        cfg.top_k,
    )
    return out, logits, disp


def forward_batch(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    tokens: np.ndarray,
    valid: np.ndarray | None = None,
) -> ForwardOutput:
    """Causal forward over a right-padded [B, T] batch of token ids."""
    tokens = np.asarray(tokens)
    b, t = tokens.shape
    if t > cfg.max_seq_len:
        raise ContractError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ContractError("token id out of vocabulary")
    valid = np.ones((b, t), bool) if valid is None else np.asarray(valid, bool)
    d = cfg.d_model
    fwd, back = position_ids(tokens)
    x = nx.add(nx.take_rows(params["embed"], tokens), nx.take_rows(params["pos"], fwd))
    x = nx.add(x, nx.take_rows(params["pos_back"], np.minimum(back, cfg.max_seq_len - 1)))
    mask = Tensor(_causal_mask(t))
    scale = 1.0 / math.sqrt(d)
    aux, disps, rlogits = [], [], []
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        hn = nx.rms_norm(x, params[p + "attn_norm"])
        q = nx.matmul(hn, params[p + "wq"])
        k = nx.matmul(hn, params[p + "wk"])
        v = nx.matmul(hn, params[p + "wv"])
        att = nx.softmax(nx.add(nx.mul(nx.matmul(q, nx.transpose(k)), scale), mask))
        x = nx.add(x, nx.matmul(nx.matmul(att, v), params[p + "wo"]))
        hn = nx.reshape(nx.rms_norm(x, params[p + "moe_norm"]), (b * t, d))
        out, logits, disp = moe_forward(hn, l, params, cfg)
        aux.append(nx.load_balance(logits, disp.indices, valid.reshape(-1)))
        disps.append(disp)
        rlogits.append(logits.data)
        x = nx.add(x, nx.reshape(out, (b, t, d)))
    x = nx.rms_norm(x, params["final_norm"])
    return ForwardOutput(nx.matmul(x, params["head"]), aux, disps, rlogits)


def _pad(seqs: list) -> tuple[np.ndarray, np.ndarray]:
    t = max(len(s) for s in seqs)
    toks = np.full((len(seqs), t), PAD, dtype=np.int64)
    valid = np.zeros((len(seqs), t), bool)
    for i, s in enumerate(seqs):
        toks[i, : len(s)] = s
        valid[i, : len(s)] = True
    return toks, valid


def _split_traces(out: ForwardOutput, lengths: list[int], t: int) -> list[RoutingTrace]:
    traces = []
    for i, n in enumerate(lengths):
        rows = slice(i * t, i * t + n)
        traces.append(
            RoutingTrace([
                LayerRouting(d.indices[rows].copy(), d.weights[rows].copy(), d.norms[rows].copy(), lg[rows].copy())
                for d, lg in zip(out.dispatches, out.router_logits)
            ])
        )
    return traces


def forward_many(ckpt: Checkpoint, seqs: list, capture: bool = False, batch_size: int = 64):
    """Run many sequences in padded batches.

    Returns a list of [len_i, V] logit arrays and, if ``capture``, a list of traces.
    """
    params = as_tensors(ckpt)
    all_logits, all_traces = [], []
    for s in range(0, len(seqs), batch_size):
        chunk = [list(q) for q in seqs[s : s + batch_size]]
        toks, valid = _pad(chunk)
        out = forward_batch(params, ckpt.config, toks, valid)
        lens = [len(q) for q in chunk]
        all_logits += [out.logits.data[i, :n] for i, n in enumerate(lens)]
        if capture:
            all_traces += _split_traces(out, lens, toks.shape[1])
    return (all_logits, all_traces) if capture else (all_logits, None)


def forward(ckpt: Checkpoint, tokens, capture: bool = False):
    """Single-sequence forward: ``(logits [t, V], trace or None)``."""
    tokens = list(tokens)
    logits, traces = forward_many(ckpt, [tokens], capture=capture)
    return logits[0], (traces[0] if capture else None)


def greedy_decode_many(ckpt: Checkpoint, prompts: list, max_new) -> list[list[int]]:
    """Batched argmax decoding (ties to the lower id); stops per row at EOS or its cap.

    ``max_new`` is an int or one cap per prompt. Returned continuations include
    the EOS when one was produced.
    """
    n = len(prompts)
    if n == 0:
        return []
    caps = [int(max_new)] * n if np.isscalar(max_new) else [int(c) for c in max_new]
    if any(len(p) == 0 for p in prompts):
        raise ContractError("prompt must be non-empty")
    cfg = ckpt.config
    params = as_tensors(ckpt)
    lens = np.array([len(p) for p in prompts])
    limit = min(cfg.max_seq_len, int((lens + np.array(caps)).max()))
    buf = np.full((n, limit), PAD, dtype=np.int64)
    for i, p in enumerate(prompts):
        buf[i, : len(p)] = p
    outs: list[list[int]] = [[] for _ in range(n)]
    active = np.array([c > 0 and lens[i] < limit for i, c in enumerate(caps)])
    while active.any():
        rows = np.nonzero(active)[0]
        t = int(lens[rows].max())
        out = forward_batch(params, cfg, buf[rows, :t])
        last = out.logits.data[np.arange(len(rows)), lens[rows] - 1]
        nxt = last.argmax(axis=1)
        for r, tok in zip(rows, nxt):
            tok = int(tok)
            outs[r].append(tok)
            buf[r, lens[r]] = tok
            lens[r] += 1
            if tok == EOS or len(outs[r]) >= caps[r] or lens[r] >= limit:
                active[r] = False
    return outs


def greedy_decode(ckpt: Checkpoint, prompt, max_new: int) -> list[int]:
    return greedy_decode_many(ckpt, [list(prompt)], max_new)[0]


# --------------------------------------------------------------------------
# checkpoint file format
#
#   8 bytes  magic b"MOECKPT1"
#   8 bytes  little-endian uint64 header length H
#   H bytes  UTF-8 JSON header, space padded so the blob starts 64-byte aligned
#   blob     little-endian f32 tensors, each at a 64-byte aligned offset


MAGIC = b"MOECKPT1"
ALIGN = 64


class CheckpointError(Exception):
    pass


class CheckpointHeaderError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    directory, chunks, off = [], [], 0
    for name in sorted(ckpt.params):
        raw = np.ascontiguousarray(ckpt.params[name], dtype="<f4").tobytes()
        start = _align(off)
        if start > off:
            chunks.append(b"\0" * (start - off))
        directory.append({"name": name, "shape": list(ckpt.params[name].shape), "dtype": "f32",
                          "offset": start, "length": len(raw)})
        chunks.append(raw)
        off = start + len(raw)
    blob = b"".join(chunks)
    header = {
        "format": "moeprune-checkpoint/1",
        "config": ckpt.config.to_dict(),
        "tensors": directory,
        "remap": ckpt.remap,
        "meta": ckpt.meta,
        "blob_length": len(blob),
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    hlen = _align(len(MAGIC) + 8 + len(hjson)) - len(MAGIC) - 8
    hjson = hjson + b" " * (hlen - len(hjson))
    path.write_bytes(MAGIC + struct.pack("<Q", hlen) + hjson + blob)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointHeaderError("missing checkpoint magic")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointHeaderError("header length exceeds file size")
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
        cfg_d = dict(header["config"])
        cfg = ModelConfig(**cfg_d)
        directory = header["tensors"]
        blob_len = int(header["blob_length"])
    except (ValueError, KeyError, TypeError, ContractError) as exc:
        raise CheckpointHeaderError(f"malformed checkpoint header: {exc}") from exc
    blob = data[16 + hlen :]
    if len(blob) != blob_len:
        raise CheckpointTruncatedError(f"blob has {len(blob)} bytes, header declares {blob_len}")
    expected = param_shapes(cfg)
    params = {}
    for entry in directory:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointShapeError(f"{name}: shape {shape} does not match config {expected.get(name)}")
        if entry["length"] != 4 * int(np.prod(shape)) or entry["offset"] + entry["length"] > blob_len:
            raise CheckpointShapeError(f"{name}: byte range inconsistent with shape")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=entry["offset"])
        params[name] = arr.reshape(shape).astype(np.float32)
    if params.keys() != expected.keys():
        raise CheckpointShapeError(f"missing tensors: {sorted(expected.keys() - params.keys())}")
    remap = header.get("remap")
    return Checkpoint(cfg, params, remap, header.get("meta") or {})


def with_config(ckpt: Checkpoint, **changes) -> Checkpoint:
    return Checkpoint(replace(ckpt.config, **changes), dict(ckpt.params), ckpt.remap, dict(ckpt.meta))
