"""Experiment configuration: a strict, diffable JSON file.

Five sections (model, mechanism, training, data, output); unknown
sections or keys are rejected so a frozen config stays unambiguous.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .backbone import ModelConfig
from .mechanisms import MechanismKind
from .trainer import TrainConfig

TASKS = ("copy", "reverse", "assoc_retrieval", "quadratic", "lm")


class ConfigError(ValueError):
    pass


_REQUIRED = object()

_SCHEMA = {
    "model": {
        "n_layers": (int, _REQUIRED),
        "n_heads": (int, _REQUIRED),
        "d_model": (int, _REQUIRED),
        "d_ff": (int, _REQUIRED),
        "dropout": (float, 0.0),
        "segment_length": (int, _REQUIRED),
        "dtype": (str, "float64"),
    },
    "mechanism": {
        "kind": (str, _REQUIRED),
        "m": (int, 0),
        "m_cache": (int, 0),
        "k_bptt": (int, 0),
    },
    "training": {
        "batch_size": (int, 32),
        "max_steps": (int, 1000),
        "lr": (float, 1e-4),
        "plateau_decay": (float, 0.5),
        "plateau_patience": (int, 10),
        "grad_clip": (float, 0.25),
        "seed": (int, 0),
        "eval_every": (int, 200),
        "log_every": (int, 50),
        "aux_loss_weight": (float, 0.0),
    },
    "data": {
        "task": (str, _REQUIRED),
        "path": (str, ""),
        "src_len": (int, 24),
        "vocab_payload": (int, 16),
        "n_pairs": (int, 4),
        "n_keys": (int, 26),
        "n_vals": (int, 26),
        "max_root": (int, 100),
        "max_alpha": (int, 10),
        "no_roots_frac": (float, 0.2),
        "step_len": (int, 30),
        "n_train": (int, 1000),
        "n_val": (int, 100),
        "n_test": (int, 200),
        "base_seed": (int, 1),
        "corpus_path": (str, ""),
        "sample_segments": (int, 4),
        "eval_segment_counts": (list, None),
        "eval_seeds": (list, None),
    },
    "output": {
        "run_dir": (str, "run"),
    },
}


@dataclass
class ExperimentConfig:
    model: ModelConfig
    mech: MechanismKind
    train: TrainConfig
    data: dict
    output: dict
    raw: dict = field(default_factory=dict, repr=False)


def _check_section(name: str, given: dict) -> dict:
    schema = _SCHEMA[name]
    unknown = set(given) - set(schema)
    if unknown:
        raise ConfigError(f"section {name!r}: unknown keys {sorted(unknown)}")
    out = {}
    for key, (typ, default) in schema.items():
        if key in given:
            v = given[key]
            if typ is float and isinstance(v, int):
                v = float(v)
            if typ is not list and not isinstance(v, typ) or isinstance(v, bool):
                raise ConfigError(f"{name}.{key}: expected {typ.__name__}, "
                                  f"got {type(v).__name__}")
            if typ is list and not isinstance(v, list):
                raise ConfigError(f"{name}.{key}: expected list")
            out[key] = v
        elif default is _REQUIRED:
            raise ConfigError(f"{name}.{key}: required key missing")
        else:
            out[key] = default
    return out


def parse_config(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    for sec in _SCHEMA:
        if sec not in raw:
            raise ConfigError(f"missing section {sec!r}")
    model_d = _check_section("model", raw["model"])
    mech_d = _check_section("mechanism", raw["mechanism"])
    train_d = _check_section("training", raw["training"])
    data_d = _check_section("data", raw["data"])
    out_d = _check_section("output", raw["output"])

    if data_d["task"] not in TASKS:
        raise ConfigError(f"data.task: unknown task {data_d['task']!r}")

    try:
        mech = MechanismKind(kind=mech_d["kind"], m=mech_d["m"],
                             m_cache=mech_d["m_cache"], k_bptt=mech_d["k_bptt"])
    except ValueError as e:
        raise ConfigError(f"mechanism: {e}")

    from . import tasks as tasklib
    if data_d["task"] == "lm":
        text = tasklib.load_corpus(data_d["corpus_path"] or None)
        vocab = tasklib.Vocab.from_text(text)
    else:
        vocab = tasklib.task_vocab(data_d["task"], data_d)

    try:
        model = ModelConfig(
            n_layers=model_d["n_layers"], n_heads=model_d["n_heads"],
            d_model=model_d["d_model"], d_ff=model_d["d_ff"],
            vocab_size=len(vocab), dropout=model_d["dropout"],
            segment_length=model_d["segment_length"],
            memory_size=mech.m, mechanism=mech.kind, dtype=model_d["dtype"])
        train = TrainConfig(
            k_bptt=mech.k_bptt, batch_size=train_d["batch_size"],
            max_steps=train_d["max_steps"], lr=train_d["lr"],
            plateau_decay=train_d["plateau_decay"],
            plateau_patience=train_d["plateau_patience"],
            grad_clip=train_d["grad_clip"], seed=train_d["seed"],
            eval_every=train_d["eval_every"], log_every=train_d["log_every"],
            aux_loss_weight=train_d["aux_loss_weight"])
    except ValueError as e:
        raise ConfigError(str(e))

    return ExperimentConfig(model=model, mech=mech, train=train,
                            data=data_d, output=out_d, raw=raw)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path}: invalid JSON ({e})")
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    return parse_config(raw)
