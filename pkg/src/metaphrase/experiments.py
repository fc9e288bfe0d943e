"""Synthetic multi-domain experiment harness.

Builds the on-disk world (domain specs, pair TSVs, unlabeled corpus, vocab),
loads it back, runs the three training variants that make up the ablation
ladder, and scores target-dev generations:

* ``baseline``: pretrain, then fine-tune adapters on the target pairs.
* ``plain_source``: pretrain, plain adapter training on pooled source pairs,
  then fine-tune.
* ``meta``: pretrain, meta-train adapters on source tasks, then fine-tune.

Domain roles inside a family of n: the last domain is the target, the
second-to-last is the meta-validation domain, the rest are sources.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import data as dt
from . import decoding as dec
from . import meta as mt
from . import metrics as mx
from . import model as mm
from . import pipeline as pl


@dataclass
class DataSettings:
    n_domains: int = 6
    pairs_per_domain: int = 2000
    target_train: int = 64
    target_valid: int = 48
    target_test: int = 48
    source_valid: int = 64
    pre_cap: int = 4000  # unlabeled sentences kept for stage (a)
    synth_seed: int = 1234
    nouns: int = 14
    verbs: int = 8
    places: int = 8
    subst_prob: float = 1.0
    reorder_prob: float = 0.6


@dataclass
class World:
    vocab: dt.Vocab
    pre_corpus: list
    source: dt.CorpusSet
    validation: dt.CorpusSet
    target: dt.CorpusSet
    target_dev_src: list[str]
    target_dev_ref: list[str]


def _write_pairs_tsv(path, texts):
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in texts:
            fh.write(f"{a}\t{b}\n")


def build_world_files(settings: DataSettings, out_dir) -> None:
    """Materialize the synthetic world under out_dir (synth-data command)."""
    if settings.n_domains < 3:
        raise ValueError("need at least one source, one validation and one target domain")
    os.makedirs(os.path.join(out_dir, "domains"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "pairs"), exist_ok=True)

    specs = dt.domain_family(
        settings.n_domains, seed=settings.synth_seed, nouns=settings.nouns,
        verbs=settings.verbs, places=settings.places,
        subst_prob=settings.subst_prob, reorder_prob=settings.reorder_prob,
    )
    for spec in specs:
        with open(os.path.join(out_dir, "domains", f"{spec.name}.spec"), "w") as fh:
            fh.write(dt.write_domain_spec(spec))

    unlabeled: list[str] = []
    source_train_texts: list[str] = []

    for role_idx, spec in enumerate(specs):
        texts, _ = dt.synth_domain(spec, settings.pairs_per_domain)
        if role_idx == settings.n_domains - 1:  # target
            n_train, n_valid, n_test = settings.target_train, settings.target_valid, settings.target_test
            labeled = texts[: n_train + n_valid + n_test]
            leftover = texts[n_train + n_valid + n_test :]
            _write_pairs_tsv(os.path.join(out_dir, "pairs", "target.train.tsv"), labeled[:n_train])
            _write_pairs_tsv(
                os.path.join(out_dir, "pairs", "target.valid.tsv"),
                labeled[n_train : n_train + n_valid],
            )
            _write_pairs_tsv(
                os.path.join(out_dir, "pairs", "target.test.tsv"),
                labeled[n_train + n_valid :],
            )
            for a, b in leftover:
                unlabeled += [a, b]
        else:
            prefix = "validation" if role_idx == settings.n_domains - 2 else "source"
            train = texts[: -settings.source_valid]
            valid = texts[-settings.source_valid :]
            _write_pairs_tsv(
                os.path.join(out_dir, "pairs", f"{prefix}_{spec.name}.train.tsv"), train
            )
            _write_pairs_tsv(
                os.path.join(out_dir, "pairs", f"{prefix}_{spec.name}.valid.tsv"), valid
            )
            for a, b in train:
                unlabeled += [a, b]
            if prefix == "source":
                source_train_texts += [a for a, _ in train] + [b for _, b in train]

    # Cap the unlabeled pool with an even stride so every domain stays
    # represented; vocabulary is built before capping so coverage is full.
    vocab = dt.Vocab.build([unlabeled, source_train_texts])
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    if settings.pre_cap and len(unlabeled) > settings.pre_cap:
        stride = len(unlabeled) / settings.pre_cap
        unlabeled = [unlabeled[int(i * stride)] for i in range(settings.pre_cap)]
    with open(os.path.join(out_dir, "pre_corpus.txt"), "w", encoding="utf-8") as fh:
        for line in unlabeled:
            fh.write(line + "\n")

    # Convenience evaluation inputs for the target dev split.
    with open(os.path.join(out_dir, "pairs", "target.valid.tsv"), encoding="utf-8") as fh:
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    with open(os.path.join(out_dir, "target_dev.src.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(a + "\n" for a, _ in rows)
    with open(os.path.join(out_dir, "target_dev.ref.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(b + "\n" for _, b in rows)


def load_world(data_dir) -> World:
    vocab = dt.Vocab.load(os.path.join(data_dir, "vocab.txt"))
    pre_corpus = dt.load_sentences(os.path.join(data_dir, "pre_corpus.txt"), vocab)

    pairs_dir = os.path.join(data_dir, "pairs")
    source_domains, validation_domains = {}, {}
    for name in sorted(os.listdir(pairs_dir)):
        if not name.endswith(".train.tsv") or name.startswith("target"):
            continue
        prefix, domain = name.split("_", 1)
        domain = domain[: -len(".train.tsv")]
        train = dt.load_pairs(os.path.join(pairs_dir, name), vocab)
        valid_path = os.path.join(pairs_dir, f"{prefix}_{domain}.valid.tsv")
        valid = dt.load_pairs(valid_path, vocab) if os.path.exists(valid_path) else []
        splits = dt.SplitPairs(train=train, valid=valid)
        (source_domains if prefix == "source" else validation_domains)[domain] = splits

    def target_split(split):
        path = os.path.join(pairs_dir, f"target.{split}.tsv")
        return dt.load_pairs(path, vocab) if os.path.exists(path) else []

    target = dt.CorpusSet(
        role="tgt",
        domains={
            "target": dt.SplitPairs(
                train=target_split("train"), valid=target_split("valid"),
                test=target_split("test"),
            )
        },
    )
    with open(os.path.join(data_dir, "target_dev.src.txt"), encoding="utf-8") as fh:
        dev_src = fh.read().splitlines()
    with open(os.path.join(data_dir, "target_dev.ref.txt"), encoding="utf-8") as fh:
        dev_ref = fh.read().splitlines()
    return World(
        vocab=vocab,
        pre_corpus=pre_corpus,
        source=dt.CorpusSet(role="src", domains=source_domains),
        validation=dt.CorpusSet(role="src", domains=validation_domains),
        target=target,
        target_dev_src=dev_src,
        target_dev_ref=dev_ref,
    )


# ---------------------------------------------------------------------------
# variant runs
# ---------------------------------------------------------------------------


@dataclass
class RunSettings:
    pretrain_steps: int = 2000
    pretrain_batch: int = 16
    pretrain_lr: float = 3e-3
    pretrain_clean_frac: float = 0.5
    meta_steps: int = 200
    finetune_steps: int = 200
    finetune_mode: str = "maml"
    eval_every: int = 20


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def evaluate_checkpoint(ckpt_path, world: World, decode_cfg: dec.DecodeConfig,
                        out_dir, tag: str) -> mx.MetricReport:
    """Greedy-decode the target dev sources and score against references."""
    src_path = os.path.join(out_dir, f"{tag}.src.txt")
    ref_path = os.path.join(out_dir, f"{tag}.ref.txt")
    gen_path = os.path.join(out_dir, f"{tag}.gen.txt")
    with open(src_path, "w", encoding="utf-8") as fh:
        fh.writelines(line + "\n" for line in world.target_dev_src)
    with open(ref_path, "w", encoding="utf-8") as fh:
        fh.writelines(line + "\n" for line in world.target_dev_ref)
    dec.generate_file(ckpt_path, src_path, gen_path, decode_cfg)
    report = mx.evaluate_corpus(gen_path, ref_path, src_path)
    with open(os.path.join(out_dir, f"{tag}.metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    return report


def run_pretrain(world: World, config: mm.ModelConfig, noise: pl.NoiseConfig,
                 run: RunSettings, seed: int, out_dir) -> str:
    result = pl.pretrain_stage(
        config, world.pre_corpus, noise, steps=run.pretrain_steps,
        seed=pl.derive_seed(seed, "pretrain"), batch_size=run.pretrain_batch,
        lr=run.pretrain_lr, vocab=world.vocab, clean_frac=run.pretrain_clean_frac,
    )
    path = os.path.join(out_dir, "pretrained.ckpt")
    pl.save_checkpoint(result.checkpoint, path)
    mt.write_history_csv(result.history, os.path.join(out_dir, "pretrain_history.csv"))
    return path


def run_variant(variant: str, pretrained_path: str, world: World,
                hyper: mt.TrainHyper, run: RunSettings, seed: int, out_dir) -> str:
    """Run one ladder variant from a shared pretrained checkpoint.

    Returns the path of the fine-tuned checkpoint.
    """
    os.makedirs(out_dir, exist_ok=True)
    pretrained = pl.load_checkpoint(pretrained_path)
    stop_meta = mt.StopCriteria(max_steps=run.meta_steps, eval_every=run.eval_every)
    stop_ft = mt.StopCriteria(max_steps=run.finetune_steps, eval_every=run.eval_every)

    if variant == "baseline":
        ft_parent = pretrained
        allow_pretrained = True
        ft_mode = "plain"
    elif variant in ("plain_source", "meta"):
        mode = "plain" if variant == "plain_source" else "maml"
        if mode == "plain":
            # Match the meta variant's stage-(b) data exposure: one meta
            # step visits meta_batch_tasks batches, a plain step visits one.
            stop_meta = mt.StopCriteria(
                max_steps=run.meta_steps * hyper.meta_batch_tasks,
                eval_every=run.eval_every,
            )
        stage_b = pl.meta_train_stage(
            pretrained, world.source, hyper, stop_meta,
            seed=pl.derive_seed(seed, f"{variant}-stage-b"),
            validation=world.validation, mode=mode,
        )
        stage_b_path = os.path.join(out_dir, "meta_trained.ckpt")
        pl.save_checkpoint(stage_b.checkpoint, stage_b_path)
        mt.write_history_csv(stage_b.history, os.path.join(out_dir, "stage_b_history.csv"))
        ft_parent = stage_b.checkpoint
        allow_pretrained = False
        ft_mode = run.finetune_mode if variant == "meta" else "plain"
    else:
        raise ValueError(f"unknown variant {variant!r}")

    stage_c = pl.finetune_stage(
        ft_parent, world.target, hyper, stop_ft,
        seed=pl.derive_seed(seed, f"{variant}-stage-c"),
        mode=ft_mode, allow_pretrained=allow_pretrained,
    )
    ft_path = os.path.join(out_dir, "finetuned.ckpt")
    pl.save_checkpoint(stage_c.checkpoint, ft_path)
    mt.write_history_csv(stage_c.history, os.path.join(out_dir, "stage_c_history.csv"))
    return ft_path


LADDER_VARIANTS = ("baseline", "plain_source", "meta")


def run_ladder(world: World, config: mm.ModelConfig, noise: pl.NoiseConfig,
               hyper: mt.TrainHyper, run: RunSettings, seed: int, out_dir,
               decode_cfg: dec.DecodeConfig | None = None) -> dict[str, mx.MetricReport]:
    """Pretrain once, run all three variants, score target dev; one seed."""
    decode_cfg = decode_cfg or dec.DecodeConfig(strategy="greedy", max_decode_len=config.max_len)
    os.makedirs(out_dir, exist_ok=True)
    log(f"[seed {seed}] pretraining ({run.pretrain_steps} steps)")
    pretrained_path = run_pretrain(world, config, noise, run, seed, out_dir)

    reports = {}
    for variant in LADDER_VARIANTS:
        log(f"[seed {seed}] variant {variant}")
        variant_dir = os.path.join(out_dir, variant)
        ft_path = run_variant(variant, pretrained_path, world, hyper, run, seed, variant_dir)
        reports[variant] = evaluate_checkpoint(ft_path, world, decode_cfg, variant_dir, "dev")
        log(f"[seed {seed}] {variant}: BLEU-2 {reports[variant].scores['BLEU-2']:.2f}")
    return reports
