"""Command-line entry point: generate | train | eval | dump-attention."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import tasks
from .backbone import init_params
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .heatmap import dump_attention
from .mechanisms import MechanismKind
from .tensor import ContractError, NumericError
from .trainer import (Trainer, evaluate_solve_rate, evaluate_teacher_forced)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class DataError(RuntimeError):
    pass


def _dataset_files(data_dir):
    return {split: os.path.join(data_dir, f"{split}.txt")
            for split in ("train", "valid", "test")}


def build_samples(ecfg: ExperimentConfig, base_seed: int | None = None):
    """Generate the three splits in memory from disjoint seed ranges."""
    d = ecfg.data
    seed = d["base_seed"] if base_seed is None else base_seed
    if d["task"] == "lm":
        text = tasks.load_corpus(d["corpus_path"] or None)
        vocab = tasks.Vocab.from_text(text)
        sample_len = d["sample_segments"] * ecfg.model.segment_length
        tr, va, te = tasks.lm_splits(text)
        return {"train": tasks.lm_samples(tr, vocab, sample_len),
                "val": tasks.lm_samples(va, vocab, sample_len),
                "test": tasks.lm_samples(te, vocab, sample_len)}, vocab
    ranges = tasks.split_seed_ranges(seed, d["n_train"], d["n_val"], d["n_test"])
    vocab = tasks.task_vocab(d["task"], d)
    out = {}
    for (lo, hi), split in zip(ranges, ("train", "val", "test")):
        out[split] = [tasks.make_sample(d["task"], s, d) for s in range(lo, hi)]
    return out, vocab


def load_samples(ecfg: ExperimentConfig):
    """Load datasets from data.path, or generate in memory when unset."""
    d = ecfg.data
    if d["task"] == "lm" or not d["path"]:
        return build_samples(ecfg)[0]
    files = _dataset_files(d["path"])
    out = {}
    for split, fname in (("train", files["train"]), ("val", files["valid"]),
                         ("test", files["test"])):
        if not os.path.exists(fname):
            raise DataError(f"dataset file missing: {fname} (run 'generate' first)")
        out[split], _ = tasks.read_dataset(fname)
    return out


def _check_compat(ecfg: ExperimentConfig, samples: dict):
    sample_len = len(samples["train"][0].input_ids)
    if ecfg.model.segment_length > sample_len:
        raise DataError(f"segment_length {ecfg.model.segment_length} exceeds "
                        f"sample length {sample_len}")
    top = max(int(s.input_ids.max()) for s in samples["train"][:64])
    if top >= ecfg.model.vocab_size:
        raise DataError(f"dataset token id {top} >= vocab_size "
                        f"{ecfg.model.vocab_size}")


def cmd_generate(args) -> int:
    ecfg = load_config(args.config)
    d = ecfg.data
    out_dir = args.out or d["path"]
    if not out_dir:
        raise ConfigError("data.path (or --out) must name the dataset directory")
    os.makedirs(out_dir, exist_ok=True)
    if d["task"] == "lm":
        text = tasks.load_corpus(d["corpus_path"] or None)
        for split, part in zip(("train", "valid", "test"), tasks.lm_splits(text)):
            with open(os.path.join(out_dir, f"{split}.txt"), "w") as f:
                f.write(part)
        print(f"wrote lm corpus splits to {out_dir}")
        return 0
    seed = d["base_seed"]
    ranges = tasks.split_seed_ranges(seed, d["n_train"], d["n_val"], d["n_test"])
    files = _dataset_files(out_dir)
    manifest = {"task": d["task"], "base_seed": seed, "splits": {}}
    for (lo, hi), split in zip(ranges, ("train", "valid", "test")):
        samples = [tasks.make_sample(d["task"], s, d) for s in range(lo, hi)]
        tasks.write_dataset(files[split], samples,
                            {"task": d["task"], "seed_start": lo,
                             "seed_end": hi, "n": hi - lo})
        manifest["splits"][split] = {"file": files[split], "seed_start": lo,
                                     "seed_end": hi, "n": hi - lo}
        print(f"wrote {hi - lo} {split} samples to {files[split]}")
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return 0


def cmd_train(args) -> int:
    ecfg = load_config(args.config)
    if args.seed_override is not None:
        ecfg.train.seed = args.seed_override
    run_dir = args.out or ecfg.output["run_dir"]
    samples = load_samples(ecfg)
    _check_compat(ecfg, samples)
    metric_mode = "lm" if ecfg.data["task"] == "lm" else "accuracy"
    trainer = Trainer(ecfg.model, ecfg.mech, ecfg.train, samples, run_dir,
                      metric_mode=metric_mode)
    last = os.path.join(run_dir, "last.ckpt")
    if os.path.exists(last):
        trainer.load_checkpoint(last)
        print(f"resumed from {last} at step {trainer.step}")
    trainer.run()
    trainer.save_checkpoint("last.ckpt")
    print(f"trained {trainer.step} steps; run dir: {run_dir}")
    return 0


def _load_model(ecfg: ExperimentConfig, ckpt_path: str):
    params = init_params(ecfg.model, ecfg.train.seed)
    if not os.path.exists(ckpt_path):
        raise DataError(f"checkpoint not found: {ckpt_path}")
    meta = load_checkpoint(ckpt_path, params)
    return params, meta


def cmd_eval(args) -> int:
    ecfg = load_config(args.config)
    ckpt = args.checkpoint or os.path.join(ecfg.output["run_dir"], "best.ckpt")
    params, meta = _load_model(ecfg, ckpt)
    d = ecfg.data
    eval_seeds = d["eval_seeds"] or [d["base_seed"]]
    seg_counts = d["eval_segment_counts"]
    report = {"checkpoint": ckpt, "step": meta.get("step"), "results": []}

    for seed in eval_seeds:
        if d["task"] == "lm":
            samples = build_samples(ecfg)[0]["test"]
        else:
            samples = build_samples(ecfg, base_seed=seed)[0]["test"]
        entry = {"seed": seed}
        stats = evaluate_teacher_forced(params, ecfg.model, ecfg.mech, samples)
        entry["accuracy"] = stats["accuracy"]
        entry["loss"] = stats["loss"]
        if d["task"] == "lm":
            ppl, bpc = tasks.lm_metrics(stats["loss"])
            entry["ppl"], entry["bpc"] = ppl, bpc
        if d["task"] == "quadratic":
            entry["solve_rate"] = evaluate_solve_rate(
                params, ecfg.model, ecfg.mech, samples, step_len=d["step_len"])
        if seg_counts:
            sample_len = len(samples[0].input_ids)
            by_segments = {}
            for n_seg in seg_counts:
                L = -(-sample_len // int(n_seg))
                cfg_n = type(ecfg.model)(**{**ecfg.model.__dict__,
                                            "segment_length": L})
                s = evaluate_teacher_forced(params, cfg_n, ecfg.mech, samples)
                by_segments[str(n_seg)] = {"accuracy": s["accuracy"],
                                           "loss": s["loss"]}
            entry["by_segments"] = by_segments
        report["results"].append(entry)

    accs = [r["accuracy"] for r in report["results"]]
    report["accuracy_mean"] = float(np.mean(accs))
    report["accuracy_std"] = float(np.std(accs))
    out_dir = args.out or ecfg.output["run_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "eval_report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(f"accuracy {report['accuracy_mean']:.4f} +/- {report['accuracy_std']:.4f}")
    for r in report["results"]:
        extras = " ".join(f"{k}={v:.4f}" for k, v in r.items()
                          if isinstance(v, float) and k != "accuracy")
        print(f"  seed {r['seed']}: accuracy={r['accuracy']:.4f} {extras}")
    return 0


def cmd_dump_attention(args) -> int:
    ecfg = load_config(args.config)
    ckpt = args.checkpoint or os.path.join(ecfg.output["run_dir"], "best.ckpt")
    params, _ = _load_model(ecfg, ckpt)
    samples = load_samples(ecfg)["test"]
    if not 0 <= args.sample_id < len(samples):
        raise DataError(f"sample id {args.sample_id} out of range "
                        f"(test set has {len(samples)} samples)")
    out_dir = args.out or os.path.join(ecfg.output["run_dir"], "attention")
    files = dump_attention(params, ecfg.model, ecfg.mech,
                           samples[args.sample_id].input_ids, out_dir)
    print(f"wrote {len(files)} files to {out_dir}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="rmtlab",
                                description="segment-recurrent transformer lab")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("generate", cmd_generate), ("train", cmd_train),
                     ("eval", cmd_eval), ("dump-attention", cmd_dump_attention)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--checkpoint", default=None)
        sp.add_argument("--seed-override", type=int, default=None)
        sp.add_argument("--out", default=None)
        if name == "dump-attention":
            sp.add_argument("--sample-id", type=int, default=0)
        sp.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"error[usage]: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ContractError, FileNotFoundError) as e:
        print(f"error[data]: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error[numeric]: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
