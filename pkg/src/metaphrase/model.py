"""Miniature pre-norm encoder-decoder transformer with bottleneck adapters.

Parameters live in a ``ParamStore`` where every array carries a partition
tag: ``backbone`` (frozen after pretraining), ``adapter`` or ``norm`` (the
trainable set during meta-training and fine-tuning). Adapters are bottleneck
feed-forward layers with a residual connection, initialized so that they are
an exact identity map; enabling them changes nothing until they are trained.

Forward passes build autodiff graphs, so the same code serves training
(teacher-forced NLL) and decoding. Parameters may be passed either as a
ParamStore or as a name -> Node mapping, which is how adapted (inner-loop
updated) parameters flow through without touching the store.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node

PARTITIONS = ("backbone", "adapter", "norm")

ADAPTER_SITES = ("enc_attn", "enc_ffn", "dec_attn", "dec_cross", "dec_ffn")

# One adapter after the self-attention sublayer and one after the
# feed-forward sublayer of every layer; none after decoder cross-attention.
DEFAULT_PLACEMENT = frozenset({"enc_attn", "enc_ffn", "dec_attn", "dec_ffn"})

NEG_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    n_enc_layers: int
    n_dec_layers: int
    d_ff: int
    vocab_size: int
    max_len: int
    adapter_hidden: int = 128
    adapter_placement: frozenset = DEFAULT_PLACEMENT
    tie_embeddings: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        extents = (
            self.d_model,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.d_ff,
            self.vocab_size,
            self.max_len,
        )
        if any(e <= 0 for e in extents):
            raise ValueError(f"all extents must be positive, got {extents}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.adapter_hidden < 0:
            raise ValueError("adapter_hidden must be >= 0")
        unknown = set(self.adapter_placement) - set(ADAPTER_SITES)
        if unknown:
            raise ValueError(f"unknown adapter sites: {sorted(unknown)}")
        if self.adapter_placement and self.adapter_hidden == 0:
            raise ValueError("adapter_hidden must be positive when adapters are placed")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class ParamStore:
    """Named float64 parameter arrays, each tagged with a partition."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self._partitions: dict[str, str] = {}

    def add(self, name: str, values: np.ndarray, partition: str) -> None:
        if name in self._arrays:
            raise ValueError(f"duplicate parameter {name!r}")
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r} for {name!r}")
        self._arrays[name] = np.asarray(values, dtype=np.float64)
        self._partitions[name] = partition

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def set(self, name: str, values: np.ndarray) -> None:
        old = self._arrays[name]
        values = np.asarray(values, dtype=np.float64)
        if values.shape != old.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {values.shape} vs {old.shape}"
            )
        self._arrays[name] = values

    def names(self) -> list[str]:
        return list(self._arrays)

    def partition(self, name: str) -> str:
        return self._partitions[name]

    def items(self):
        return self._arrays.items()

    def leaves(self) -> dict[str, Node]:
        return {name: ad.leaf(name, arr) for name, arr in self._arrays.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, arr in self._arrays.items():
            out.add(name, arr.copy(), self._partitions[name])
        return out

    def values_snapshot(self, names=None) -> dict[str, np.ndarray]:
        names = self.names() if names is None else names
        return {n: self._arrays[n].copy() for n in names}


def partition_params(store: ParamStore) -> tuple[list[str], list[str]]:
    """Split names into (theta, phi): backbone vs adapters + normalization."""
    theta, phi = [], []
    for name in store.names():
        part = store.partition(name)
        if part == "backbone":
            theta.append(name)
        else:
            phi.append(name)
    return theta, phi


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

_INIT_STD = 0.02


def _add_linear(store, rng, prefix, n_in, n_out, partition="backbone"):
    store.add(f"{prefix}.w", rng.normal(0.0, _INIT_STD, (n_in, n_out)), partition)
    store.add(f"{prefix}.b", np.zeros(n_out), partition)


def _add_norm(store, prefix, d):
    store.add(f"{prefix}.gain", np.ones(d), "norm")
    store.add(f"{prefix}.bias", np.zeros(d), "norm")


def _add_adapter(store, rng, prefix, d_model, hidden):
    # W_u and both biases start at zero so the residual makes the adapter an
    # exact identity at insertion.
    bound = 1.0 / np.sqrt(d_model)
    store.add(f"{prefix}.wd", rng.uniform(-bound, bound, (d_model, hidden)), "adapter")
    store.add(f"{prefix}.bd", np.zeros(hidden), "adapter")
    store.add(f"{prefix}.wu", np.zeros((hidden, d_model)), "adapter")
    store.add(f"{prefix}.bu", np.zeros(d_model), "adapter")


def _adapter_prefixes(config: ModelConfig) -> list[str]:
    out = []
    for i in range(config.n_enc_layers):
        if "enc_attn" in config.adapter_placement:
            out.append(f"enc.{i}.adapter_attn")
        if "enc_ffn" in config.adapter_placement:
            out.append(f"enc.{i}.adapter_ffn")
    for i in range(config.n_dec_layers):
        if "dec_attn" in config.adapter_placement:
            out.append(f"dec.{i}.adapter_attn")
        if "dec_cross" in config.adapter_placement:
            out.append(f"dec.{i}.adapter_cross")
        if "dec_ffn" in config.adapter_placement:
            out.append(f"dec.{i}.adapter_ffn")
    return out


def param_layout(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, partition) for every parameter, without allocating.

    Single source of truth for checkpoint validation and accounting; the
    builder produces exactly these names and shapes.
    """
    d, dff = config.d_model, config.d_ff
    out: list[tuple[str, tuple, str]] = [
        ("tok_embed", (config.vocab_size, d), "backbone"),
        ("pos_enc", (config.max_len, d), "backbone"),
        ("pos_dec", (config.max_len, d), "backbone"),
    ]

    def linear(prefix, n_in, n_out):
        out.append((f"{prefix}.w", (n_in, n_out), "backbone"))
        out.append((f"{prefix}.b", (n_out,), "backbone"))

    def norm(prefix):
        out.append((f"{prefix}.gain", (d,), "norm"))
        out.append((f"{prefix}.bias", (d,), "norm"))

    for i in range(config.n_enc_layers):
        p = f"enc.{i}"
        norm(f"{p}.ln1")
        for proj in ("wq", "wk", "wv", "wo"):
            linear(f"{p}.attn.{proj}", d, d)
        norm(f"{p}.ln2")
        linear(f"{p}.ffn.w1", d, dff)
        linear(f"{p}.ffn.w2", dff, d)
    norm("enc.final_ln")

    for i in range(config.n_dec_layers):
        p = f"dec.{i}"
        norm(f"{p}.ln1")
        for proj in ("wq", "wk", "wv", "wo"):
            linear(f"{p}.self.{proj}", d, d)
        norm(f"{p}.ln2")
        for proj in ("wq", "wk", "wv", "wo"):
            linear(f"{p}.cross.{proj}", d, d)
        norm(f"{p}.ln3")
        linear(f"{p}.ffn.w1", d, dff)
        linear(f"{p}.ffn.w2", dff, d)
    norm("dec.final_ln")

    if not config.tie_embeddings:
        out.append(("out_proj", (d, config.vocab_size), "backbone"))

    for prefix in _adapter_prefixes(config):
        h = config.adapter_hidden
        out.append((f"{prefix}.wd", (d, h), "adapter"))
        out.append((f"{prefix}.bd", (h,), "adapter"))
        out.append((f"{prefix}.wu", (h, d), "adapter"))
        out.append((f"{prefix}.bu", (d,), "adapter"))
    return out


def build_model(config: ModelConfig, seed: int) -> ParamStore:
    """Deterministically initialize a ParamStore from (config, seed).

    Backbone and adapter parameters draw from independent seeded streams, so
    the backbone is bit-identical whether or not adapters are placed.
    """
    rng = np.random.default_rng([int(seed), 0])
    store = ParamStore()
    d, dff = config.d_model, config.d_ff

    store.add("tok_embed", rng.normal(0.0, _INIT_STD, (config.vocab_size, d)), "backbone")
    store.add("pos_enc", rng.normal(0.0, _INIT_STD, (config.max_len, d)), "backbone")
    store.add("pos_dec", rng.normal(0.0, _INIT_STD, (config.max_len, d)), "backbone")

    for i in range(config.n_enc_layers):
        p = f"enc.{i}"
        _add_norm(store, f"{p}.ln1", d)
        for proj in ("wq", "wk", "wv", "wo"):
            _add_linear(store, rng, f"{p}.attn.{proj}", d, d)
        _add_norm(store, f"{p}.ln2", d)
        _add_linear(store, rng, f"{p}.ffn.w1", d, dff)
        _add_linear(store, rng, f"{p}.ffn.w2", dff, d)
    _add_norm(store, "enc.final_ln", d)

    for i in range(config.n_dec_layers):
        p = f"dec.{i}"
        _add_norm(store, f"{p}.ln1", d)
        for proj in ("wq", "wk", "wv", "wo"):
            _add_linear(store, rng, f"{p}.self.{proj}", d, d)
        _add_norm(store, f"{p}.ln2", d)
        for proj in ("wq", "wk", "wv", "wo"):
            _add_linear(store, rng, f"{p}.cross.{proj}", d, d)
        _add_norm(store, f"{p}.ln3", d)
        _add_linear(store, rng, f"{p}.ffn.w1", d, dff)
        _add_linear(store, rng, f"{p}.ffn.w2", dff, d)
    _add_norm(store, "dec.final_ln", d)

    if not config.tie_embeddings:
        store.add("out_proj", rng.normal(0.0, _INIT_STD, (d, config.vocab_size)), "backbone")

    rng_adapter = np.random.default_rng([int(seed), 1])
    for prefix in _adapter_prefixes(config):
        _add_adapter(store, rng_adapter, prefix, d, config.adapter_hidden)
    return store


def insert_adapters(store: ParamStore, config: ModelConfig, seed: int) -> ParamStore:
    """Return a copy of the store with identity-initialized adapters added.

    Used when a checkpoint was trained without adapters (stage a) and the
    next stage needs them. Existing arrays are copied bit-exactly.
    """
    out = store.copy()
    rng = np.random.default_rng([int(seed), 1])
    for prefix in _adapter_prefixes(config):
        if f"{prefix}.wd" not in out:
            _add_adapter(out, rng, prefix, config.d_model, config.adapter_hidden)
    return out


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


@dataclass
class AdapterLayer:
    """Bottleneck adapter: up(relu(down(z))) + z, biases on both projections."""

    w_down: Node
    b_down: Node
    w_up: Node
    b_up: Node


def adapter_apply(adapter: AdapterLayer, z: Node) -> Node:
    hidden = ad.relu(ad.add(ad.matmul(z, adapter.w_down), adapter.b_down))
    return ad.add(ad.add(ad.matmul(hidden, adapter.w_up), adapter.b_up), z)


def _as_nodes(params) -> Mapping[str, Node]:
    if isinstance(params, ParamStore):
        return params.leaves()
    return params


def _linear(p, prefix, x):
    return ad.add(ad.matmul(x, p[f"{prefix}.w"]), p[f"{prefix}.b"])


def _norm(p, prefix, x, eps):
    return ad.layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"], eps=eps)


def _maybe_adapter(p, prefix, x):
    if f"{prefix}.wd" not in p:
        return x
    layer = AdapterLayer(p[f"{prefix}.wd"], p[f"{prefix}.bd"], p[f"{prefix}.wu"], p[f"{prefix}.bu"])
    return adapter_apply(layer, x)


def _attention(p, prefix, config, queries, keys, mask, trace):
    """Multi-head attention; heads are slices of the projected width."""
    q = _linear(p, f"{prefix}.wq", queries)
    k = _linear(p, f"{prefix}.wk", keys)
    v = _linear(p, f"{prefix}.wv", keys)
    dh = config.d_head
    heads = []
    for h in range(config.n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_axis(q, -1, lo, hi)
        kh = ad.slice_axis(k, -1, lo, hi)
        vh = ad.slice_axis(v, -1, lo, hi)
        scores = ad.scale(ad.matmul(qh, ad.transpose_last2(kh)), 1.0 / np.sqrt(dh))
        if mask is not None:
            scores = ad.mask_fill(scores, mask, NEG_FILL)
        probs = ad.softmax_lastdim(scores)
        if trace is not None:
            trace.setdefault("attention", []).append(probs)
        heads.append(ad.matmul(probs, vh))
    merged = heads[0] if len(heads) == 1 else ad.concat(heads, axis=-1)
    return _linear(p, f"{prefix}.wo", merged)


def _embed(p, table_name, ids, pos_name, config):
    seq_len = ids.shape[-1]
    if seq_len > config.max_len:
        raise ValueError(f"sequence length {seq_len} exceeds max_len {config.max_len}")
    if ids.size and ids.max() >= config.vocab_size:
        raise ValueError(f"token id {ids.max()} out of range for vocab {config.vocab_size}")
    tok = ad.embed_lookup(p[table_name], ids)
    pos = ad.embed_lookup(p[pos_name], np.arange(seq_len))
    return ad.add(tok, pos)


def _encode(p, config, src, src_mask, trace):
    x = _embed(p, "tok_embed", src, "pos_enc", config)
    key_mask = None
    if src_mask is not None and not src_mask.all():
        key_mask = ~src_mask[:, None, :]  # (B, 1, S): hide pad keys
    for i in range(config.n_enc_layers):
        prefix = f"enc.{i}"
        h = _norm(p, f"{prefix}.ln1", x, config.ln_eps)
        attn = _attention(p, f"{prefix}.attn", config, h, h, key_mask, trace)
        x = ad.add(x, _maybe_adapter(p, f"{prefix}.adapter_attn", attn))
        h = _norm(p, f"{prefix}.ln2", x, config.ln_eps)
        ff = _linear(p, f"{prefix}.ffn.w2", ad.gelu(_linear(p, f"{prefix}.ffn.w1", h)))
        x = ad.add(x, _maybe_adapter(p, f"{prefix}.adapter_ffn", ff))
    return _norm(p, "enc.final_ln", x, config.ln_eps)


def forward_batch(params, config: ModelConfig, src, tgt, src_mask=None, tgt_mask=None, trace=None) -> Node:
    """Teacher-forced decoder logits, shape (batch, prefix_len, vocab).

    ``src``/``tgt`` are int arrays (batch, len); the boolean masks flag real
    (non-pad) positions. Causal masking applies in decoder self-attention.
    """
    p = _as_nodes(params)
    src = np.asarray(src, dtype=np.int64)
    tgt = np.asarray(tgt, dtype=np.int64)
    if src.ndim != 2 or tgt.ndim != 2:
        raise ValueError("forward_batch expects (batch, len) token arrays")

    memory = _encode(p, config, src, src_mask, trace)
    x = _embed(p, "tok_embed", tgt, "pos_dec", config)

    t = tgt.shape[1]
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)
    self_mask = causal
    if tgt_mask is not None and not tgt_mask.all():
        self_mask = causal[None, :, :] | (~tgt_mask[:, None, :])
    cross_mask = None
    if src_mask is not None and not src_mask.all():
        cross_mask = ~src_mask[:, None, :]

    for i in range(config.n_dec_layers):
        prefix = f"dec.{i}"
        h = _norm(p, f"{prefix}.ln1", x, config.ln_eps)
        attn = _attention(p, f"{prefix}.self", config, h, h, self_mask, trace)
        x = ad.add(x, _maybe_adapter(p, f"{prefix}.adapter_attn", attn))
        h = _norm(p, f"{prefix}.ln2", x, config.ln_eps)
        cross = _attention(p, f"{prefix}.cross", config, h, memory, cross_mask, trace)
        x = ad.add(x, _maybe_adapter(p, f"{prefix}.adapter_cross", cross))
        h = _norm(p, f"{prefix}.ln3", x, config.ln_eps)
        ff = _linear(p, f"{prefix}.ffn.w2", ad.gelu(_linear(p, f"{prefix}.ffn.w1", h)))
        x = ad.add(x, _maybe_adapter(p, f"{prefix}.adapter_ffn", ff))

    x = _norm(p, "dec.final_ln", x, config.ln_eps)
    if config.tie_embeddings:
        return ad.matmul(x, ad.transpose_last2(p["tok_embed"]))
    return ad.matmul(x, p["out_proj"])


def forward(params, config: ModelConfig, src_tokens, tgt_prefix_tokens, trace=None) -> Node:
    """Single-example logits, shape (prefix_len, vocab)."""
    src = np.asarray(src_tokens, dtype=np.int64)[None, :]
    tgt = np.asarray(tgt_prefix_tokens, dtype=np.int64)[None, :]
    logits = forward_batch(params, config, src, tgt, trace=trace)
    return ad.reshape(logits, logits.value.shape[1:])


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def nll_loss(logits: Node, target_tokens, mean: bool = False) -> Node:
    """Negative log-likelihood of the targets, summed over positions.

    ``mean=True`` divides by the number of positions (optimizer scaling).
    """
    targets = np.asarray(target_tokens, dtype=np.int64)
    per_pos = ad.cross_entropy_with_logits(logits, targets)
    return ad.mean_all(per_pos) if mean else ad.sum_all(per_pos)


def batch_nll(logits: Node, targets, target_mask) -> Node:
    """Masked NLL over a padded batch: sum per pair, averaged over pairs."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(target_mask, dtype=np.float64)
    per_pos = ad.cross_entropy_with_logits(logits, targets)
    total = ad.sum_all(ad.mul(per_pos, ad.constant(mask)))
    return ad.scale(total, 1.0 / targets.shape[0])


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def param_counts(config: ModelConfig) -> tuple[int, int, float]:
    """Closed-form (total, trainable, ratio) for a config.

    Must agree with exhaustively enumerating the built ParamStore; a test
    pins that equivalence.
    """
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    linear = lambda n_in, n_out: n_in * n_out + n_out
    attn = 4 * linear(d, d)
    ffn = linear(d, dff) + linear(dff, d)
    norm = 2 * d

    embeddings = v * d + 2 * config.max_len * d
    if not config.tie_embeddings:
        embeddings += d * v
    backbone = (
        embeddings
        + config.n_enc_layers * (attn + ffn)
        + config.n_dec_layers * (2 * attn + ffn)
    )

    norms = (
        config.n_enc_layers * 2 * norm
        + config.n_dec_layers * 3 * norm
        + 2 * norm
    )
    adapter = linear(d, config.adapter_hidden) + linear(config.adapter_hidden, d)
    n_adapters = len(_adapter_prefixes(config))
    trainable = norms + n_adapters * adapter

    total = backbone + trainable
    return total, trainable, trainable / total


def bart_large_config() -> ModelConfig:
    """BART-large-shaped dimensions for parameter accounting."""
    return ModelConfig(
        d_model=1024,
        n_heads=16,
        n_enc_layers=12,
        n_dec_layers=12,
        d_ff=4096,
        vocab_size=50265,
        max_len=1024,
        adapter_hidden=128,
    )
