"""Segment-level recurrent training with truncated BPTT.

A sample is processed as consecutive fixed-length segments.  Token memory
is carried between segments; hand-offs older than ``k_bptt`` segments are
detached, so gradient flows through at most ``k_bptt`` previous segments
while values always flow forward.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tasks
from .backbone import ForwardResult, ModelConfig, forward_stack, init_params
from .mechanisms import LayerCache, MechanismKind, carry_memory, update_cache
from .optim import Adam, PlateauScheduler, clip_global_norm
from .tensor import (ContractError, DropoutRng, Tensor, add, backward,
                     broadcast_to, check_finite, cross_entropy_from_logits,
                     detach, layer_norm, matmul, no_grad, reshape, scale)


@dataclass
class TrainConfig:
    k_bptt: int = 0
    batch_size: int = 32
    max_steps: int = 1000
    lr: float = 1e-4
    plateau_decay: float = 0.5
    plateau_patience: int = 10
    grad_clip: float = 0.25
    seed: int = 0
    eval_every: int = 200
    log_every: int = 50
    aux_loss_weight: float = 0.0

    def __post_init__(self):
        if not 0 <= self.k_bptt <= 4:
            raise ValueError("k_bptt must be in 0..4")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.plateau_decay < 1.0:
            raise ValueError("plateau_decay must be in (0, 1)")


@dataclass
class SegmentedSample:
    segments: list                 # (L,) or (B, L) int arrays, in order
    loss_mask: np.ndarray          # padded to the segmented length
    n_segments: int
    orig_len: int


def split_into_segments(token_ids: np.ndarray, L: int,
                        loss_mask: np.ndarray | None = None) -> SegmentedSample:
    """Split along the last axis into ceil(len/L) segments.

    The final segment is right-padded with the pad token; padded positions
    are excluded from the loss mask.
    """
    if L < 1:
        raise ContractError("split_into_segments: L must be >= 1")
    token_ids = np.asarray(token_ids)
    n = token_ids.shape[-1]
    if n == 0:
        raise ContractError("split_into_segments: empty sequence")
    n_seg = -(-n // L)
    pad = n_seg * L - n
    if loss_mask is None:
        loss_mask = np.ones(token_ids.shape, dtype=bool)
    if pad:
        pad_width = [(0, 0)] * (token_ids.ndim - 1) + [(0, pad)]
        token_ids = np.pad(token_ids, pad_width, constant_values=tasks.PAD)
        loss_mask = np.pad(loss_mask, pad_width, constant_values=False)
    segments = [token_ids[..., i * L:(i + 1) * L] for i in range(n_seg)]
    return SegmentedSample(segments, loss_mask, n_seg, n)


def shifted_targets(x: np.ndarray, is_target: np.ndarray):
    """Next-token targets/mask: position i is scored iff token i+1 is a
    target position."""
    t = np.concatenate([x[..., 1:],
                        np.full(x.shape[:-1] + (1,), tasks.PAD, x.dtype)], axis=-1)
    m = np.concatenate([is_target[..., 1:],
                        np.zeros(is_target.shape[:-1] + (1,), bool)], axis=-1)
    return t, m


def initial_memory(params: dict, cfg: ModelConfig, batch: int) -> Tensor | None:
    if cfg.memory_size == 0 or "memory.tokens" not in params:
        return None
    mem = params["memory.tokens"]
    return broadcast_to(reshape(mem, (1, cfg.memory_size, cfg.d_model)),
                        (batch, cfg.memory_size, cfg.d_model))


def run_recurrent_forward(params: dict, cfg: ModelConfig, mech: MechanismKind,
                          segments: list, *, k_bptt: int | None = None,
                          rng: DropoutRng | None = None, training: bool = False,
                          collect_attn: bool = False):
    """Forward over all segments, carrying memory and/or the layer cache.

    Returns (per-segment ForwardResult list, carried-memory history) where
    the history holds the memory tensor that *entered* each segment.
    """
    if k_bptt is None:
        k_bptt = mech.k_bptt
    n_seg = len(segments)
    B = np.asarray(segments[0]).shape[0] if np.asarray(segments[0]).ndim > 1 else 1
    mem = initial_memory(params, cfg, B) if mech.uses_token_memory else None
    cache = LayerCache() if mech.uses_cache else None
    results: list[ForwardResult] = []
    mem_history: list[Tensor | None] = []

    for t, seg in enumerate(segments):
        if mech.carries_memory and t > 0 and t < n_seg - k_bptt:
            # hand-off beyond the BPTT window: value passes, gradient stops
            mem = detach(mem)
        mem_history.append(mem)
        res = forward_stack(params, seg, mem, cache, cfg, rng=rng,
                            training=training, collect_attn=collect_attn)
        if mech.carries_memory:
            mem = carry_memory(res.write_out)
        if mech.uses_cache:
            cache = update_cache(cache, res.layer_inputs, mech.m_cache)
        results.append(res)
    return results, mem_history


def masked_lm_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
                   reduction: str = "mean") -> Tensor:
    """Cross entropy over masked positions of one segment's logits."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("masked_lm_loss: mask selects no positions")
    B, L, V = logits.shape
    return cross_entropy_from_logits(reshape(logits, (B * L, V)),
                                     np.asarray(targets).reshape(-1),
                                     mask.reshape(-1), reduction=reduction)


def aux_memory_loss(write_logits: Tensor) -> Tensor:
    """Cross entropy of the dedicated special token at write positions."""
    B, m, V = write_logits.shape
    targets = np.full(B * m, tasks.AUX, dtype=np.int64)
    return cross_entropy_from_logits(reshape(write_logits, (B * m, V)), targets)


def write_block_logits(params: dict, write_out: Tensor) -> Tensor:
    h = layer_norm(write_out, params["ln_f.g"], params["ln_f.b"])
    return add(matmul(h, params["head.weight"]), params["head.bias"])


def truncated_bptt_step(params: dict, cfg: ModelConfig, mech: MechanismKind,
                        x: np.ndarray, is_target: np.ndarray, *,
                        rng: DropoutRng | None = None, training: bool = True,
                        aux_weight: float = 0.0):
    """One full-sample pass: forward over all segments, combined loss.

    Loss is the mean cross entropy over every masked target position of
    every segment, plus ``aux_weight`` times the auxiliary memory loss.
    Returns (loss Tensor, results, mem_history, stats dict).
    """
    L = cfg.segment_length
    tgt, msk = shifted_targets(x, is_target)
    seg = split_into_segments(x, L)
    seg_t = split_into_segments(tgt, L)
    seg_m = [msk_pad for msk_pad in
             np.split(np.pad(msk, [(0, 0)] * (msk.ndim - 1)
                             + [(0, seg.n_segments * L - msk.shape[-1])],
                             constant_values=False),
                      seg.n_segments, axis=-1)]

    results, mem_history = run_recurrent_forward(
        params, cfg, mech, seg.segments, rng=rng, training=training)

    total_count = int(sum(m.sum() for m in seg_m))
    if total_count == 0:
        raise ContractError("truncated_bptt_step: no target positions")
    seg_losses = []
    for res, t_seg, m_seg in zip(results, seg_t.segments, seg_m):
        if m_seg.any():
            seg_losses.append(masked_lm_loss(res.logits, t_seg, m_seg,
                                             reduction="sum"))
    main = seg_losses[0]
    for sl in seg_losses[1:]:
        main = add(main, sl)
    main = scale(main, 1.0 / total_count)

    aux_val = 0.0
    loss = main
    if aux_weight > 0.0 and mech.carries_memory:
        aux_terms = [aux_memory_loss(write_block_logits(params, r.write_out))
                     for r in results]
        aux = aux_terms[0]
        for a in aux_terms[1:]:
            aux = add(aux, a)
        aux = scale(aux, 1.0 / len(aux_terms))
        aux_val = aux.item()
        loss = add(main, scale(aux, aux_weight))

    stats = {"loss": loss.item(), "main_loss": main.item(), "aux_loss": aux_val,
             "n_targets": total_count}
    return loss, results, mem_history, stats


# -- evaluation ---------------------------------------------------------------


def _batched(samples: list, batch_size: int):
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x = np.stack([s.input_ids for s in chunk])
        m = np.stack([s.loss_mask for s in chunk])
        yield x, m


def evaluate_teacher_forced(params: dict, cfg: ModelConfig, mech: MechanismKind,
                            samples: list, batch_size: int = 64):
    """Per-character accuracy and mean loss over masked target positions."""
    correct = total = 0
    loss_sum = 0.0
    with no_grad():
        for x, is_target in _batched(samples, batch_size):
            tgt, msk = shifted_targets(x, is_target)
            seg = split_into_segments(x, cfg.segment_length)
            pad = seg.n_segments * cfg.segment_length - x.shape[-1]
            tgt = np.pad(tgt, [(0, 0), (0, pad)], constant_values=tasks.PAD)
            msk = np.pad(msk, [(0, 0), (0, pad)], constant_values=False)
            results, _ = run_recurrent_forward(params, cfg, mech, seg.segments)
            logits = np.concatenate([r.logits.data for r in results], axis=1)
            preds = logits.argmax(axis=-1)
            correct += int(((preds == tgt) & msk).sum())
            total += int(msk.sum())
            z = logits.reshape(-1, logits.shape[-1])
            zmax = z.max(axis=1, keepdims=True)
            lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
            nll = lse - z[np.arange(z.shape[0]), tgt.reshape(-1)]
            loss_sum += float((nll * msk.reshape(-1)).sum())
    if total == 0:
        raise ContractError("evaluate_teacher_forced: no target positions")
    return {"accuracy": correct / total, "loss": loss_sum / total,
            "n_targets": total}


def greedy_decode(params: dict, cfg: ModelConfig, mech: MechanismKind,
                  prompt: np.ndarray, gen_len: int) -> np.ndarray:
    """Free-running generation of one final segment.

    The prompt (a whole number of segments) is consumed teacher-forced to
    build up memory/cache state; the next ``gen_len`` tokens are then
    decoded greedily one position at a time.
    """
    L = cfg.segment_length
    if prompt.ndim == 1:
        prompt = prompt[None, :]
    if prompt.shape[-1] % L != 0:
        raise ContractError("greedy_decode: prompt must be whole segments")
    B = prompt.shape[0]
    segs = [prompt[:, i * L:(i + 1) * L] for i in range(prompt.shape[-1] // L)]
    with no_grad():
        results, _ = run_recurrent_forward(params, cfg, mech, segs)
        if mech.carries_memory:
            mem = carry_memory(results[-1].write_out)
        elif mech.uses_token_memory:
            mem = initial_memory(params, cfg, B)
        else:
            mem = None
        cache = None
        if mech.uses_cache:
            cache = LayerCache()
            for r in results:
                cache = update_cache(cache, r.layer_inputs, mech.m_cache)
        out = np.empty((B, gen_len), dtype=np.int64)
        out[:, 0] = results[-1].logits.data[:, -1].argmax(axis=-1)
        for t in range(1, gen_len):
            res = forward_stack(params, out[:, :t], mem, cache, cfg)
            out[:, t] = res.logits.data[:, -1].argmax(axis=-1)
    return out


def _strip_at_pad(row: np.ndarray) -> np.ndarray:
    hits = np.nonzero(row == tasks.PAD)[0]
    return row[:hits[0]] if hits.size else row


def evaluate_solve_rate(params: dict, cfg: ModelConfig, mech: MechanismKind,
                        samples: list, batch_size: int = 64,
                        step_len: int = 30) -> float:
    """Exact-match rate of the freely decoded final (answer) segment."""
    vocab = tasks.Vocab.quadratic()
    gen_answers, ref_answers = [], []
    for x, _ in _batched(samples, batch_size):
        prompt = x[:, :-step_len]
        decoded = greedy_decode(params, cfg, mech, prompt, step_len)
        for row, ref_row in zip(decoded, x[:, -step_len:]):
            gen_answers.append(vocab.decode(_strip_at_pad(row)))
            ref_answers.append(vocab.decode(_strip_at_pad(ref_row)))
    return tasks.solve_rate(gen_answers, ref_answers)


# -- training loop ------------------------------------------------------------


class MetricsLog:
    """Append-only line-delimited metric records; timestamps go to a
    separate file so the metric bytes are deterministic."""

    def __init__(self, run_dir):
        self.path = os.path.join(run_dir, "metrics.jsonl")
        self.time_path = os.path.join(run_dir, "times.log")

    def append(self, record: dict):
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        with open(self.time_path, "a") as f:
            f.write(f"{time.time():.3f}\n")


class Trainer:
    """Owns parameters, optimizer, scheduler and the metric log."""

    def __init__(self, cfg: ModelConfig, mech: MechanismKind,
                 tcfg: TrainConfig, data: dict, run_dir: str,
                 metric_mode: str = "accuracy"):
        self.cfg = cfg
        self.mech = mech
        self.tcfg = tcfg
        self.data = data
        self.run_dir = run_dir
        self.metric_mode = metric_mode
        os.makedirs(run_dir, exist_ok=True)
        self.params = init_params(cfg, tcfg.seed)
        self.opt = Adam(self.params, lr=tcfg.lr)
        self.sched = PlateauScheduler(tcfg.lr, tcfg.plateau_decay,
                                      tcfg.plateau_patience)
        self.rng = DropoutRng(tcfg.seed)
        self.log = MetricsLog(run_dir)
        self.step = 0
        self.best_val = float("inf")

    def _batch(self, step: int):
        rng = np.random.default_rng((self.tcfg.seed, step))
        train = self.data["train"]
        idx = rng.integers(0, len(train), self.tcfg.batch_size)
        x = np.stack([train[i].input_ids for i in idx])
        m = np.stack([train[i].loss_mask for i in idx])
        return x, m

    def train_step(self):
        x, is_target = self._batch(self.step)
        self.rng.seed = self.tcfg.seed + 7919 * (self.step + 1)
        self.rng.reset()
        loss, _, _, stats = truncated_bptt_step(
            self.params, self.cfg, self.mech, x, is_target,
            rng=self.rng, training=True, aux_weight=self.tcfg.aux_loss_weight)
        check_finite("loss", loss.data)
        backward(loss)
        clip_global_norm(self.params, self.tcfg.grad_clip)
        self.opt.lr = self.sched.lr
        self.opt.step()
        self.opt.zero_grad()
        self.step += 1
        return stats

    def validate(self):
        stats = evaluate_teacher_forced(self.params, self.cfg, self.mech,
                                        self.data["val"])
        # plateau metric: lower is better
        metric = stats["loss"]
        self.sched.step(metric)
        record = {"step": self.step, "split": "val",
                  "loss": round(stats["loss"], 8),
                  "accuracy": round(stats["accuracy"], 8),
                  "lr": self.sched.lr}
        if self.metric_mode == "lm":
            ppl, bpc = tasks.lm_metrics(stats["loss"])
            record["ppl"] = round(ppl, 6)
            record["bpc"] = round(bpc, 8)
        self.log.append(record)
        if metric < self.best_val:
            self.best_val = metric
            self.save_checkpoint("best.ckpt", val_metric=metric)
        return stats

    def save_checkpoint(self, name: str, **meta):
        from .checkpoint import save_checkpoint
        path = os.path.join(self.run_dir, name)
        save_checkpoint(path, self.params, self.opt.state,
                        meta={"step": self.step, "best_val": self.best_val,
                              "sched": self.sched.state_dict(), **meta})

    def load_checkpoint(self, path: str):
        from .checkpoint import load_checkpoint
        meta = load_checkpoint(path, self.params, self.opt.state)
        self.step = int(meta["step"])
        self.best_val = float(meta["best_val"])
        self.sched.load_state_dict(meta["sched"])
        return meta

    def run(self, max_steps: int | None = None):
        limit = max_steps if max_steps is not None else self.tcfg.max_steps
        while self.step < limit:
            stats = self.train_step()
            if self.step % self.tcfg.log_every == 0:
                self.log.append({"step": self.step, "split": "train",
                                 "loss": round(stats["loss"], 8),
                                 "lr": self.sched.lr})
            if self.step % self.tcfg.eval_every == 0 or self.step == limit:
                self.validate()
                self.save_checkpoint("last.ckpt")
        return self
