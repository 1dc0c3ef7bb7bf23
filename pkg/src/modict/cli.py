"""Command-line entry point: build-corpus, build-index, train, generate, evaluate, ablate.

Every command writes into its output directory a ``config.yaml`` echo (where a
config applies) and a ``manifest.json`` with the config hash, seed and SHA-256
digests of its inputs and outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import corpus as corpus_mod
from .config import RunConfig, config_from_dict, load_config
from .dataset import build_instances, corpus_tokenizer, encode_all
from .decoding import generate
from .incontext import Tokenizer, encode_instance
from .metrics import MetricsReport, compute_report, evaluate_run
from .peft import build_model, get_plan
from .retrieval import RetrievalIndex, build_index, make_encoder
from .trainer import Trainer, load_checkpoint, save_checkpoint

log = logging.getLogger("modict")

ABLATION_VARIANTS = ("modict-1shot", "w/o-mict", "full", "no-adapter", "no-adapter-no-mict")


class CommandError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers

def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: Optional[RunConfig], inputs: dict[str, Path],
                   outputs: dict[str, Path], extra: Optional[dict] = None) -> Path:
    manifest = {
        "command": command,
        "config_hash": cfg.digest() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "inputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in sorted(inputs.items())},
        "outputs": {k: {"path": Path(v).name, "sha256": file_digest(v)} for k, v in sorted(outputs.items())},
    }
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def echo_config(out_dir: Path, cfg: RunConfig) -> Path:
    path = out_dir / "config.yaml"
    path.write_text(cfg.dump(), encoding="utf-8")
    return path


def _out_dir(path: str | Path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _effective_shots(cfg: RunConfig) -> int:
    plan = get_plan(cfg.freeze_plan)
    return plan.forced_shots if plan.forced_shots is not None else cfg.shots


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"{what} not found: {path}")
    return path


# ----------------------------------------------------------------- commands

def cmd_build_corpus(cfg: RunConfig, out: str | Path) -> dict:
    """Run the keyword pipeline over a raw or synthetic catalog and split it."""
    out_dir = _out_dir(out)
    c = cfg.corpus
    inputs: dict[str, Path] = {}
    if c.dictionaries is not None:
        dict_dir = _require(Path(c.dictionaries), "dictionary directory")
        dicts = corpus_mod.AttributeDictionaries.load(dict_dir)
        for name in corpus_mod.DICT_NAMES:
            inputs[f"dict.{name}"] = dict_dir / f"{name}.txt"
    else:
        dicts = None
    if c.raw is not None:
        raw_path = _require(Path(c.raw), "raw corpus")
        if dicts is None:
            raise CommandError("a raw corpus needs corpus.dictionaries")
        raw = corpus_mod.read_corpus(raw_path)
        inputs["raw"] = raw_path
    else:
        raw, generated = corpus_mod.generate_synthetic_catalog(
            c.n_samples, c.category, cfg.seed, image_dim=c.image_dim)
        dicts = dicts or generated
    retained = corpus_mod.run_pipeline(raw, dicts, cfg.seed)
    splits = corpus_mod.split_corpus(retained, c.dev_frac, c.test_frac, cfg.seed)
    outputs: dict[str, Path] = {}
    for name, items in splits.items():
        path = out_dir / f"{name}.jsonl"
        corpus_mod.write_corpus(items, path)
        outputs[name] = path
    dicts.save(out_dir / "dictionaries")
    for name in corpus_mod.DICT_NAMES:
        outputs[f"dict.{name}"] = out_dir / "dictionaries" / f"{name}.txt"
    outputs["config"] = echo_config(out_dir, cfg)
    counts = {k: len(v) for k, v in splits.items()}
    counts["raw"] = len(raw)
    counts["retained"] = len(retained)
    stats = corpus_mod.corpus_statistics(retained)
    write_manifest(out_dir, "build-corpus", cfg, inputs, outputs, {"counts": counts, "statistics": stats})
    return {"counts": counts, "statistics": stats}


def cmd_build_index(corpus_path: str | Path, category: str, out: str | Path,
                    encoder: str = "precomputed", image_dim: Optional[int] = None, seed: int = 0) -> RetrievalIndex:
    corpus_path = _require(Path(corpus_path), "corpus file")
    samples = [s for s in corpus_mod.read_corpus(corpus_path) if s.category == category]
    if not samples:
        raise CommandError(f"no samples of category {category!r} in {corpus_path}")
    dim = image_dim or (len(samples[0].image_feature) if samples[0].image_feature is not None else 32)
    index = build_index(samples, category, make_encoder(encoder, dim, seed))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    index.save(out)
    manifest = {
        "command": "build-index",
        "category": category,
        "pool_size": len(index),
        "dim": index.dim,
        "encoder": encoder,
        "inputs": {"corpus": {"path": str(corpus_path), "sha256": file_digest(corpus_path)}},
        "outputs": {"index": {"path": out.name, "sha256": file_digest(out)}},
    }
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return index


def _load_split(corpus_dir: Path, name: str) -> list[corpus_mod.Sample]:
    return corpus_mod.read_corpus(_require(corpus_dir / f"{name}.jsonl", f"{name} split"))


def _image_dim(samples: Sequence[corpus_mod.Sample], cfg: RunConfig) -> int:
    feat = samples[0].image_feature
    return len(feat) if feat is not None else cfg.corpus.image_dim


def _category_pools(samples: Sequence[corpus_mod.Sample], encoder) -> dict[str, RetrievalIndex]:
    cats = sorted({s.category for s in samples})
    return {c: build_index([s for s in samples if s.category == c], c, encoder) for c in cats}


def _instances(queries, train, pools, encoder, shots, exclude_self, with_target):
    pool = {s.id: s for s in train}
    out = []
    for cat, index in pools.items():
        qs = [q for q in queries if q.category == cat]
        out.extend(build_instances(qs, pool, index, encoder, shots, exclude_self, with_target))
    missing = {q.category for q in queries} - set(pools)
    if missing:
        raise CommandError(f"no training pool for categories {sorted(missing)}")
    order = {q.id: i for i, q in enumerate(queries)}
    return sorted(out, key=lambda inst: order[inst.query_id])


def cmd_train(cfg: RunConfig, corpus_dir: str | Path, out: str | Path, resume: Optional[str | Path] = None) -> dict:
    corpus_dir = Path(corpus_dir)
    out_dir = _out_dir(out)
    plan = get_plan(cfg.freeze_plan)
    train = _load_split(corpus_dir, "train")
    tokenizer = corpus_tokenizer(train)
    image_dim = _image_dim(train, cfg)
    mcfg = cfg.model.to_model_config(len(tokenizer), image_dim)
    try:
        model = build_model(mcfg, plan, seed=cfg.seed, with_adapter=cfg.with_adapter)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    encoder = make_encoder(cfg.encoder, image_dim, cfg.seed)
    pools = _category_pools(train, encoder)
    instances = _instances(train, train, pools, encoder, _effective_shots(cfg), True, True)
    examples = encode_all(instances, tokenizer, mcfg)

    tcfg = cfg.train.to_train_config(cfg.seed)
    log_path = out_dir / "train_log.jsonl"
    trainer = Trainer(model, plan, tcfg)
    mode = "w"
    if resume is not None:
        trainer.state = load_checkpoint(_require(Path(resume), "checkpoint"), model, plan, trainer.opt)
        mode = "a"
    with open(log_path, mode, encoding="utf-8") as fh:
        def _log(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        trainer.log = _log
        state = trainer.fit(examples, max_steps=cfg.train.max_steps)

    tokenizer.save(out_dir / "vocab.txt")
    ckpt = out_dir / "checkpoint.ckpt"
    save_checkpoint(ckpt, model, plan, trainer.opt, state)
    outputs = {"checkpoint": ckpt, "vocab": out_dir / "vocab.txt", "log": log_path,
               "config": echo_config(out_dir, cfg)}
    inputs = {"train": corpus_dir / "train.jsonl"}
    if resume is not None:
        inputs["resume"] = Path(resume)
    write_manifest(out_dir, "train", cfg, inputs, outputs, {"step": state.step, "epoch": state.epoch})
    return {"step": state.step, "losses": state.losses}


def load_run(run_dir: str | Path):
    run_dir = Path(run_dir)
    cfg = config_from_dict(_load_yaml(_require(run_dir / "config.yaml", "run config")))
    tokenizer = Tokenizer.load(_require(run_dir / "vocab.txt", "vocabulary"))
    return cfg, tokenizer


def _load_yaml(path: Path) -> dict:
    import yaml
    return yaml.safe_load(path.read_text(encoding="utf-8")) or {}


def cmd_generate(run_dir: str | Path, corpus_dir: str | Path, split: str, out: str | Path,
                 overrides: Optional[list[str]] = None, limit: Optional[int] = None) -> list[dict]:
    """Decode every query of ``split``; references always come from the training split."""
    run_dir, corpus_dir = Path(run_dir), Path(corpus_dir)
    cfg, tokenizer = load_run(run_dir)
    if overrides:
        from .config import apply_overrides
        cfg = config_from_dict(apply_overrides(cfg.to_dict(), overrides))
    plan = get_plan(cfg.freeze_plan)
    train = _load_split(corpus_dir, "train")
    queries = _load_split(corpus_dir, split)[:limit]
    image_dim = _image_dim(train, cfg)
    mcfg = cfg.model.to_model_config(len(tokenizer), image_dim)
    model = build_model(mcfg, plan, seed=cfg.seed, with_adapter=cfg.with_adapter)
    load_checkpoint(run_dir / "checkpoint.ckpt", model, plan)
    encoder = make_encoder(cfg.encoder, image_dim, cfg.seed)
    pools = _category_pools(train, encoder)
    instances = _instances(queries, train, pools, encoder, _effective_shots(cfg), False, False)
    gcfg = cfg.gen.to_gen_config(cfg.seed)
    records = []
    for inst in instances:
        ctx = encode_instance(inst, tokenizer, mcfg.arch, mcfg.visual_prefix_len, mcfg.max_seq_len)
        ids = generate(model, ctx, gcfg, eos_id=tokenizer.eos_id, pad_id=tokenizer.pad_id)
        records.append({"id": inst.query_id, "text": tokenizer.detokenize(ids),
                        "reference_ids": [r.sample_id for r in inst.references]})
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    manifest = {
        "command": "generate",
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "split": split,
        "shots": _effective_shots(cfg),
        "inputs": {k: {"path": str(p), "sha256": file_digest(p)} for k, p in {
            "checkpoint": run_dir / "checkpoint.ckpt", "train": corpus_dir / "train.jsonl",
            split: corpus_dir / f"{split}.jsonl"}.items()},
        "outputs": {"predictions": {"path": out.name, "sha256": file_digest(out)}},
    }
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return records


def cmd_evaluate(predictions: str | Path, references: str | Path, out: str | Path, mode: str = "word") -> MetricsReport:
    out_dir = _out_dir(out)
    report = evaluate_run(_require(Path(predictions), "predictions"), _require(Path(references), "references"), mode)
    (out_dir / "report.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(report.table())
    write_manifest(out_dir, "evaluate", None,
                   {"predictions": Path(predictions), "references": Path(references)},
                   {"report": out_dir / "report.json", "table": out_dir / "report.txt"})
    return report


def ablation_config(base: RunConfig, variant: str) -> RunConfig:
    primary = "seq2seq-half-encoder" if base.model.arch == "encoder-decoder" else "decoder-only-adapter"
    table = {
        "modict-1shot": (primary, 1),
        "w/o-mict": (primary, 0),
        "full": ("full", 1),
        "no-adapter": ("no-adapter", 1),
        "no-adapter-no-mict": ("no-adapter-no-mict", 0),
    }
    if variant not in table:
        raise CommandError(f"unknown ablation variant {variant!r}")
    plan, shots = table[variant]
    return replace(base, freeze_plan=plan, shots=shots, with_adapter=None)


def cmd_ablate(cfg: RunConfig, corpus_dir: str | Path, out: str | Path, split: str = "test",
               variants: Sequence[str] = ABLATION_VARIANTS, limit: Optional[int] = None) -> dict[str, dict]:
    """Train, decode and score each variant with identical seed and budget."""
    out_dir = _out_dir(out)
    corpus_dir = Path(corpus_dir)
    refs = out_dir / "references.jsonl"
    queries = _load_split(corpus_dir, split)[:limit]
    with open(refs, "w", encoding="utf-8", newline="\n") as fh:
        for q in queries:
            fh.write(json.dumps({"id": q.id, "text": q.description}, ensure_ascii=False, sort_keys=True) + "\n")
    rows: dict[str, dict] = {}
    for variant in variants:
        vcfg = ablation_config(cfg, variant)
        slug = variant.replace("/", "_")
        vdir = out_dir / slug
        cmd_train(vcfg, corpus_dir, vdir)
        preds = vdir / "predictions.jsonl"
        cmd_generate(vdir, corpus_dir, split, preds, limit=limit)
        report = cmd_evaluate(preds, refs, vdir / "eval")
        rows[variant] = {"freeze_plan": vcfg.freeze_plan, "shots": _effective_shots(vcfg), **report.as_dict()}
    (out_dir / "table.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    (out_dir / "table.md").write_text(format_table(rows))
    echo_config(out_dir, cfg)
    write_manifest(out_dir, "ablate", cfg, {"train": corpus_dir / "train.jsonl", split: corpus_dir / f"{split}.jsonl"},
                   {"table": out_dir / "table.json"})
    return rows


def format_table(rows: dict[str, dict]) -> str:
    cols = ["bleu1", "bleu2", "rouge1_f", "rougeL_f", "d2", "d3", "d4", "d5"]
    heads = ["variant", "plan", "k", "B@1", "B@2", "R@1", "R@L", "D-2", "D-3", "D-4", "D-5"]
    lines = ["| " + " | ".join(heads) + " |", "|" + "---|" * len(heads)]
    for name, r in rows.items():
        cells = [name, r["freeze_plan"], str(r["shots"])] + [f"{r[c]:.2f}" for c in cols]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------- CLI

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modict", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=3")

    sp = sub.add_parser("build-corpus", help="build keyword corpus and splits")
    with_config(sp)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("build-index", help="build a category retrieval index")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--category", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--encoder", default="precomputed")

    sp = sub.add_parser("train", help="train a model on the training split")
    with_config(sp)
    sp.add_argument("--corpus-dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume")

    sp = sub.add_parser("generate", help="decode a split with a trained run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--corpus-dir", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    sp = sub.add_parser("evaluate", help="score predictions against references")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--references", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("word", "char"), default="word")

    sp = sub.add_parser("ablate", help="compare ModICT variants under one budget")
    with_config(sp)
    sp.add_argument("--corpus-dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--limit", type=int)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "build-corpus":
            res = cmd_build_corpus(load_config(args.config, args.set), args.out)
            print(json.dumps(res["counts"], sort_keys=True))
        elif args.command == "build-index":
            idx = cmd_build_index(args.corpus, args.category, args.out, args.encoder)
            print(json.dumps({"category": idx.category, "pool_size": len(idx)}))
        elif args.command == "train":
            res = cmd_train(load_config(args.config, args.set), args.corpus_dir, args.out, args.resume)
            last = res["losses"][-1] if res["losses"] else float("nan")
            print(json.dumps({"step": res["step"], "last_loss": last}))
        elif args.command == "generate":
            recs = cmd_generate(args.run, args.corpus_dir, args.split, args.out, args.set, args.limit)
            print(json.dumps({"predictions": len(recs)}))
        elif args.command == "evaluate":
            print(cmd_evaluate(args.predictions, args.references, args.out, args.mode).table(), end="")
        elif args.command == "ablate":
            rows = cmd_ablate(load_config(args.config, args.set), args.corpus_dir, args.out, args.split,
                              limit=args.limit)
            print(format_table(rows), end="")
    except (CommandError, ValueError, FileNotFoundError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
