"""Three-stage training pipeline and checkpointing.

Stage (a) pretrains the backbone on a token-denoising objective (mask +
delete corruption, reconstruct the original). Stage (b) inserts identity
adapters and meta-trains them on labeled source domains with the backbone
frozen. Stage (c) fine-tunes the adapters on the target domain, either by
re-running the meta algorithm over target-sampled tasks or by plain NLL
minimization.

Checkpoints are a small binary format (magic ``LAPA``): bit-exact roundtrip,
float32 payloads, a provenance chain of parent-file hashes that enforces the
stage ordering, and an embedded vocabulary so decoding needs nothing else.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import data as dt
from . import meta as mt
from . import model as mm

MAGIC = b"LAPA"
FORMAT_VERSION = 1

STAGES = ("pretrained", "meta_trained", "finetuned")

_PARTITION_CODE = {"backbone": 0, "adapter": 1, "norm": 2}
_PARTITION_NAME = {v: k for k, v in _PARTITION_CODE.items()}


class CheckpointError(ValueError):
    """Corrupt file, version mismatch, or config/parameter inconsistency."""


class StageOrderError(ValueError):
    """A stage received a checkpoint from the wrong point in the chain."""


def derive_seed(seed: int, name: str) -> int:
    """Stable sub-seed: first 4 little-endian bytes of sha256('seed/name')."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# ---------------------------------------------------------------------------
# denoising corruption
# ---------------------------------------------------------------------------


@dataclass
class NoiseConfig:
    mask_prob: float = 0.3
    delete_prob: float = 0.1
    mask_id: int = dt.MASK
    seed: int = 0

    def __post_init__(self):
        for p in (self.mask_prob, self.delete_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"corruption probabilities must be in [0, 1], got {p}")


def corrupt(tokens, noise: NoiseConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Mask then delete non-marker tokens, independently per position.

    Without an explicit rng the pattern is a pure function of (tokens, noise).
    """
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    tokens = np.asarray(tokens, dtype=np.int64)
    marker = (tokens == dt.BOS) | (tokens == dt.EOS)
    masked = np.where(
        ~marker & (rng.random(tokens.shape) < noise.mask_prob), noise.mask_id, tokens
    )
    keep = marker | (rng.random(tokens.shape) >= noise.delete_prob)
    return masked[keep]


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: mm.ModelConfig
    stage: str
    seeds: dict[str, int]
    provenance: list[str]
    store: mm.ParamStore
    vocab: dt.Vocab | None = None
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        wanted = {"pretrained": (0,), "meta_trained": (1,), "finetuned": (1, 2)}
        if len(self.provenance) not in wanted[self.stage]:
            raise ValueError(
                f"stage {self.stage!r} cannot have {len(self.provenance)} parents"
            )

    def content_hash(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


def _config_text(ckpt: Checkpoint) -> str:
    cfg = ckpt.config
    lines = [
        f"stage = {ckpt.stage}",
        f"provenance = {' '.join(ckpt.provenance)}",
    ]
    for name in sorted(ckpt.seeds):
        lines.append(f"seed.{name} = {ckpt.seeds[name]}")
    lines += [
        f"model.d_model = {cfg.d_model}",
        f"model.n_heads = {cfg.n_heads}",
        f"model.n_enc_layers = {cfg.n_enc_layers}",
        f"model.n_dec_layers = {cfg.n_dec_layers}",
        f"model.d_ff = {cfg.d_ff}",
        f"model.vocab_size = {cfg.vocab_size}",
        f"model.max_len = {cfg.max_len}",
        f"model.adapter_hidden = {cfg.adapter_hidden}",
        f"model.adapter_placement = {' '.join(sorted(cfg.adapter_placement))}",
        f"model.tie_embeddings = {int(cfg.tie_embeddings)}",
        f"model.ln_eps = {cfg.ln_eps!r}",
    ]
    if ckpt.vocab is not None:
        lines.append(f"vocab = {' '.join(ckpt.vocab.tokens())}")
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> tuple[mm.ModelConfig, str, dict, list, dt.Vocab | None]:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed config line {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        fields[key] = value

    try:
        config = mm.ModelConfig(
            d_model=int(fields["model.d_model"]),
            n_heads=int(fields["model.n_heads"]),
            n_enc_layers=int(fields["model.n_enc_layers"]),
            n_dec_layers=int(fields["model.n_dec_layers"]),
            d_ff=int(fields["model.d_ff"]),
            vocab_size=int(fields["model.vocab_size"]),
            max_len=int(fields["model.max_len"]),
            adapter_hidden=int(fields["model.adapter_hidden"]),
            adapter_placement=frozenset(fields["model.adapter_placement"].split()),
            tie_embeddings=bool(int(fields["model.tie_embeddings"])),
            ln_eps=float(fields["model.ln_eps"]),
        )
        stage = fields["stage"]
    except KeyError as exc:
        raise CheckpointError(f"config text missing field {exc}") from exc

    seeds = {
        key[len("seed."):]: int(value)
        for key, value in fields.items()
        if key.startswith("seed.")
    }
    provenance = fields.get("provenance", "").split()
    vocab = None
    if "vocab" in fields:
        tokens = fields["vocab"].split()
        if tokens[: len(dt.RESERVED)] != list(dt.RESERVED):
            raise CheckpointError("embedded vocab is missing reserved tokens")
        vocab = dt.Vocab(tokens[len(dt.RESERVED):])
    return config, stage, seeds, provenance, vocab


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    config_blob = _config_text(ckpt).encode("utf-8")
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    for name in sorted(ckpt.store.names()):
        arr = ckpt.store[name]
        name_blob = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_blob)))
        buf.write(name_blob)
        buf.write(struct.pack("<B", _PARTITION_CODE[ckpt.store.partition(name)]))
        buf.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<Q", extent))
        buf.write(arr.astype("<f4").tobytes())
    return buf.getvalue()


def _read_exact(buf: io.BytesIO, n: int, what: str) -> bytes:
    blob = buf.read(n)
    if len(blob) != n:
        raise CheckpointError(f"corrupt checkpoint: truncated while reading {what}")
    return blob


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    buf = io.BytesIO(blob)
    if _read_exact(buf, 4, "magic") != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic bytes")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )
    (config_len,) = struct.unpack("<I", _read_exact(buf, 4, "config length"))
    config_text = _read_exact(buf, config_len, "config text").decode("utf-8")
    config, stage, seeds, provenance, vocab = _parse_config_text(config_text)

    store = mm.ParamStore()
    while True:
        head = buf.read(4)
        if not head:
            break
        if len(head) != 4:
            raise CheckpointError("corrupt checkpoint: truncated record header")
        (name_len,) = struct.unpack("<I", head)
        name = _read_exact(buf, name_len, "record name").decode("utf-8")
        (part_code,) = struct.unpack("<B", _read_exact(buf, 1, f"{name} partition"))
        if part_code not in _PARTITION_NAME:
            raise CheckpointError(f"corrupt checkpoint: bad partition tag for {name!r}")
        (rank,) = struct.unpack("<B", _read_exact(buf, 1, f"{name} rank"))
        shape = tuple(
            struct.unpack("<Q", _read_exact(buf, 8, f"{name} extent"))[0]
            for _ in range(rank)
        )
        count = int(np.prod(shape)) if shape else 1
        payload = _read_exact(buf, 4 * count, f"{name} payload")
        values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
        store.add(name, values, _PARTITION_NAME[part_code])

    expected = {(n, s, p) for n, s, p in mm.param_layout(config)}
    actual = {(n, store[n].shape, store.partition(n)) for n in store.names()}
    if expected != actual:
        missing = {n for n, _, _ in expected - actual}
        extra = {n for n, _, _ in actual - expected}
        raise CheckpointError(
            "checkpoint parameters do not match the embedded config "
            f"(missing/mismatched: {sorted(missing)[:3]}, unexpected: {sorted(extra)[:3]})"
        )
    return Checkpoint(
        config=config, stage=stage, seeds=seeds, provenance=provenance,
        store=store, vocab=vocab, version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Atomic write (temp file + rename); returns the content hash."""
    blob = checkpoint_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# training loops shared by the stages
# ---------------------------------------------------------------------------


def make_pair_loss(config: mm.ModelConfig):
    """Teacher-forced NLL over a list of pairs (summed per pair, pair-mean)."""

    def loss_fn(params, batch: Sequence[dt.ParaphrasePair]):
        src_ids, src_mask = dt.pad_batch([p.src for p in batch])
        dec_ids, dec_mask = dt.pad_batch([p.tgt[:-1] for p in batch])
        label_ids, label_mask = dt.pad_batch([p.tgt[1:] for p in batch])
        logits = mm.forward_batch(params, config, src_ids, dec_ids, src_mask, dec_mask)
        return mm.batch_nll(logits, label_ids, label_mask)

    return loss_fn


@dataclass
class StageResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)


def _plain_train(store, phi_names, train_pairs, valid_pairs, hyper, steps,
                 loss_fn, rng) -> list[mt.HistoryRow]:
    """Minimize NLL over a pair set with the outer optimizer, best-val kept."""
    opt_state = None
    if hyper.outer_optimizer == "adamw":
        opt_state = mt.OptimizerState({n: store[n].shape for n in phi_names}, hyper)
    history: list[mt.HistoryRow] = []
    best = {n: store[n].copy() for n in phi_names}
    best_val = None
    eval_every = 20
    t0 = time.perf_counter()

    for step in range(1, steps + 1):
        idx = rng.choice(len(train_pairs), size=min(hyper.task_batch_size, len(train_pairs)), replace=False)
        batch = [train_pairs[int(i)] for i in idx]
        leaves = store.leaves()
        loss = loss_fn(leaves, batch)
        grads = ad.backward(loss, {n: leaves[n] for n in phi_names})
        grad_values = {n: grads[n].value for n in phi_names}
        grad_values, norm = mt.clip_global_norm(grad_values, hyper.clip_norm)
        values = {n: store[n] for n in phi_names}
        if opt_state is not None:
            new = mt.adamw_step(opt_state, values, grad_values, hyper.beta)
        else:
            new = mt.sgd_step(values, grad_values, hyper.beta)
        for n in phi_names:
            store.set(n, new[n])

        val_loss = None
        if valid_pairs and (step % eval_every == 0 or step == steps):
            val_loss = float(loss_fn(store.leaves(), valid_pairs).value)
            if not np.isfinite(val_loss):
                raise mt.DivergenceError(f"validation loss diverged at step {step}")
            if best_val is None or val_loss < best_val:
                best_val = val_loss
                best = {n: store[n].copy() for n in phi_names}
        history.append(
            mt.HistoryRow(step, float(loss.value), float(loss.value), val_loss,
                          norm, time.perf_counter() - t0)
        )

    if best_val is not None:
        for n in phi_names:
            store.set(n, best[n])
    return history


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def pretrain_stage(config: mm.ModelConfig, corpus: Sequence[np.ndarray],
                   noise: NoiseConfig, steps: int, seed: int,
                   batch_size: int = 16, lr: float = 1e-3,
                   vocab: dt.Vocab | None = None,
                   clean_frac: float = 0.5) -> StageResult:
    """Stage (a): train the backbone to reconstruct corrupted sentences.

    Adapters are withheld here (they enter at stage b); every backbone and
    normalization parameter trains. A ``clean_frac`` share of examples skips
    corruption entirely: plain copying anchors the encoder-decoder alignment
    that greedy decoding relies on, while the corrupted share carries the
    denoising objective.
    """
    base_config = replace(config, adapter_placement=frozenset())
    store = mm.build_model(base_config, seed=derive_seed(seed, "init"))
    loss_fn = make_pair_loss(base_config)
    hyper = mt.TrainHyper(beta=lr, task_batch_size=batch_size)
    trainable = store.names()  # stage (a) trains everything present

    rng = np.random.default_rng(derive_seed(seed, "pretrain_data"))
    noise_rng = np.random.default_rng(derive_seed(seed, "noise"))
    opt_state = mt.OptimizerState({n: store[n].shape for n in trainable}, hyper)
    history: list[mt.HistoryRow] = []
    t0 = time.perf_counter()
    for step in range(1, steps + 1):
        idx = rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False)
        batch = []
        for i in idx:
            tokens = corpus[int(i)]
            keep_clean = noise_rng.random() < clean_frac
            src = tokens if keep_clean else corrupt(tokens, noise, noise_rng)
            batch.append(dt.ParaphrasePair(src=src, tgt=tokens))
        leaves = store.leaves()
        loss = loss_fn(leaves, batch)
        grads = ad.backward(loss, {n: leaves[n] for n in trainable})
        grad_values, norm = mt.clip_global_norm(
            {n: grads[n].value for n in trainable}, hyper.clip_norm
        )
        new = mt.adamw_step(opt_state, {n: store[n] for n in trainable}, grad_values, lr)
        for n in trainable:
            store.set(n, new[n])
        history.append(
            mt.HistoryRow(step, float(loss.value), float(loss.value), None, norm,
                          time.perf_counter() - t0)
        )

    ckpt = Checkpoint(
        config=base_config, stage="pretrained",
        seeds={"bundle": seed}, provenance=[], store=store, vocab=vocab,
    )
    return StageResult(ckpt, history)


def meta_train_stage(pretrained: Checkpoint, source: dt.CorpusSet,
                     hyper: mt.TrainHyper, stop: mt.StopCriteria, seed: int,
                     validation: dt.CorpusSet | None = None, mode: str = "maml",
                     full_config: mm.ModelConfig | None = None) -> StageResult:
    """Stage (b): insert adapters and train them on the source domains.

    ``mode='maml'`` runs the meta algorithm over sampled tasks;
    ``mode='plain'`` minimizes pooled NLL (the source-data-only ablation).
    The backbone stays bit-identical. ``full_config`` defaults to the parent
    config with the standard adapter placement restored.
    """
    if pretrained.stage != "pretrained":
        raise StageOrderError(
            f"meta_train_stage needs a pretrained checkpoint, got {pretrained.stage!r}"
        )
    if mode not in ("maml", "plain"):
        raise ValueError(f"unknown mode {mode!r}")
    if source.role != "src":
        raise ValueError("meta_train_stage needs the source corpus set")
    if full_config is None:
        full_config = replace(pretrained.config, adapter_placement=mm.DEFAULT_PLACEMENT)

    store = mm.insert_adapters(
        pretrained.store.copy(), full_config, seed=derive_seed(seed, "adapter")
    )
    _, phi_names = mm.partition_params(store)
    loss_fn = make_pair_loss(full_config)
    rng = np.random.default_rng(derive_seed(seed, "tasks"))

    if mode == "maml":
        sampler = lambda n: [dt.sample_meta_task(source, hyper, rng) for _ in range(n)]
        validation_sampler = None
        if validation is not None:
            val_rng = np.random.default_rng(derive_seed(seed, "validation"))
            val_tasks = [
                dt.sample_meta_task(validation, hyper, val_rng) for _ in range(4)
            ]
            validation_sampler = lambda: val_tasks
        result = mt.meta_train(store, phi_names, sampler, hyper, stop, loss_fn,
                               validation_sampler=validation_sampler)
        history = result.history
    else:
        train_pairs = [p for label in sorted(source.domains)
                       for p in source.domains[label].train]
        valid_pairs = [p for label in sorted(source.domains)
                       for p in source.domains[label].valid]
        if validation is not None:
            valid_pairs += [p for label in sorted(validation.domains)
                            for p in validation.domains[label].valid
                            + validation.domains[label].train]
        history = _plain_train(store, phi_names, train_pairs, valid_pairs[:64],
                               hyper, stop.max_steps, loss_fn, rng)

    ckpt = Checkpoint(
        config=full_config, stage="meta_trained",
        seeds=dict(pretrained.seeds, stage_b=seed),
        provenance=pretrained.provenance + [pretrained.content_hash()],
        store=store, vocab=pretrained.vocab,
    )
    return StageResult(ckpt, history)


def finetune_stage(parent: Checkpoint, target: dt.CorpusSet, hyper: mt.TrainHyper,
                   stop: mt.StopCriteria, seed: int, mode: str = "maml",
                   allow_pretrained: bool = False) -> StageResult:
    """Stage (c): adapt phi on the (possibly tiny or empty) target domain.

    An empty target train set is the unsupervised configuration: phi passes
    through unchanged. ``allow_pretrained`` admits a stage-(a) checkpoint for
    the backbone-only ablation; adapters are inserted at identity then.
    """
    if parent.stage == "pretrained":
        if not allow_pretrained:
            raise StageOrderError(
                "finetune_stage needs a meta_trained checkpoint "
                "(pass allow_pretrained=True for the ablation)"
            )
        full_config = replace(parent.config, adapter_placement=mm.DEFAULT_PLACEMENT)
        store = mm.insert_adapters(
            parent.store.copy(), full_config, seed=derive_seed(seed, "adapter")
        )
    elif parent.stage == "meta_trained":
        full_config = parent.config
        store = parent.store.copy()
    else:
        raise StageOrderError(f"cannot fine-tune from stage {parent.stage!r}")
    if mode not in ("maml", "plain"):
        raise ValueError(f"unknown mode {mode!r}")
    if target.role != "tgt":
        raise ValueError("finetune_stage needs the target corpus set")

    _, phi_names = mm.partition_params(store)
    loss_fn = make_pair_loss(full_config)
    (label,) = list(target.domains)
    splits = target.domains[label]
    history: list[mt.HistoryRow] = []

    if splits.train:
        rng = np.random.default_rng(derive_seed(seed, "finetune"))
        if mode == "maml":
            task_hyper = hyper
            if hyper.task_batch_size > len(splits.train):
                task_hyper = mt.TrainHyper(
                    **{**hyper.__dict__, "task_batch_size": len(splits.train)}
                )
            sampler = lambda n: [
                dt.sample_meta_task(target, task_hyper, rng) for _ in range(n)
            ]
            validation_sampler = None
            if len(splits.valid) >= 2:
                half = len(splits.valid) // 2
                val_task = dt.MetaTask(
                    support=splits.valid[:half], query=splits.valid[half:], domain=label
                )
                validation_sampler = lambda: [val_task]
            result = mt.meta_train(store, phi_names, sampler, task_hyper, stop,
                                   loss_fn, validation_sampler=validation_sampler)
            history = result.history
            # Deployment step: the meta-trained phi is optimized for its
            # post-adaptation loss, so adapt it on the target train set
            # before freezing the checkpoint.
            deploy_hyper = mt.TrainHyper(**{**task_hyper.__dict__, "order_mode": "first"})
            adapted, _ = mt.inner_adapt(store, phi_names, splits.train,
                                        deploy_hyper, loss_fn)
            for n in phi_names:
                store.set(n, adapted[n].value)
        else:
            history = _plain_train(store, phi_names, splits.train, splits.valid,
                                   hyper, stop.max_steps, loss_fn, rng)

    ckpt = Checkpoint(
        config=full_config, stage="finetuned",
        seeds=dict(parent.seeds, stage_c=seed),
        provenance=parent.provenance + [parent.content_hash()],
        store=store, vocab=parent.vocab,
    )
    return StageResult(ckpt, history)
