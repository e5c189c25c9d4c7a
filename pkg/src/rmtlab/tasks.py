"""Algorithmic task generators, the tiny character LM corpus, and metrics.

Every generator is a pure function of its seed: datasets are generated
once from disjoint seed ranges and regenerate bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .tensor import ContractError

PAD = 0
GEN = 1          # start-to-generate delimiter
SEP = 2          # key/value block separator (associative retrieval)
AUX = 3          # target of the auxiliary memory loss
N_RESERVED = 4

QUADRATIC_CHARS = "0123456789xD^*+-=()/,;"
NO_ROOTS = "<no-roots>"


@dataclass
class Vocab:
    """Symbol <-> id bijection with the reserved control ids up front."""

    symbols: list

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocab symbols must be unique")
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    def encode(self, chars):
        return np.array([self._index[c] for c in chars], dtype=np.int64)

    def decode(self, ids):
        return "".join(self.symbols[int(i)] for i in ids)

    @staticmethod
    def _reserved():
        return ["<pad>", "<gen>", "<sep>", "<aux>"]

    @classmethod
    def payload(cls, n: int) -> "Vocab":
        return cls(cls._reserved() + [f"s{i}" for i in range(n)])

    @classmethod
    def assoc(cls, n_keys: int, n_vals: int) -> "Vocab":
        return cls(cls._reserved()
                   + [f"k{i}" for i in range(n_keys)]
                   + [f"v{i}" for i in range(n_vals)])

    @classmethod
    def quadratic(cls) -> "Vocab":
        return cls(cls._reserved() + [NO_ROOTS] + list(QUADRATIC_CHARS))

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls(cls._reserved() + sorted(set(text)))


@dataclass
class TaskSample:
    """One sequence sample: token ids, target-position mask, task tag."""

    input_ids: np.ndarray
    target_ids: np.ndarray
    loss_mask: np.ndarray     # True where the token is part of the target
    task: str

    def __post_init__(self):
        if self.loss_mask.shape != self.input_ids.shape:
            raise ValueError("loss mask must match input length")


# -- generators ---------------------------------------------------------------


def gen_copy(src_len: int, vocab_payload: int, seed: int) -> TaskSample:
    """Source, then the delimiter, then the source replicated twice."""
    if src_len < 1:
        raise ContractError("gen_copy: src_len must be >= 1")
    rng = np.random.default_rng(seed)
    src = rng.integers(N_RESERVED, N_RESERVED + vocab_payload, src_len)
    target = np.concatenate([src, src])
    ids = np.concatenate([src, [GEN], target]).astype(np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    mask[src_len + 1:] = True
    return TaskSample(ids, target.astype(np.int64), mask, "copy")


def gen_reverse(src_len: int, vocab_payload: int, seed: int) -> TaskSample:
    rng = np.random.default_rng(seed)
    src = rng.integers(N_RESERVED, N_RESERVED + vocab_payload, src_len)
    target = src[::-1].copy()
    ids = np.concatenate([src, [GEN], target]).astype(np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    mask[src_len + 1:] = True
    return TaskSample(ids, target.astype(np.int64), mask, "reverse")


def gen_assoc_retrieval(n_pairs: int, n_keys: int, n_vals: int,
                        seed: int) -> TaskSample:
    """Key-value pairs, a separator, one queried key; target is its value."""
    if n_pairs < 1 or n_pairs > n_keys:
        raise ContractError("gen_assoc_retrieval: need 1 <= n_pairs <= n_keys")
    rng = np.random.default_rng(seed)
    key_base = N_RESERVED
    val_base = N_RESERVED + n_keys
    keys = rng.choice(n_keys, size=n_pairs, replace=False) + key_base
    vals = rng.integers(0, n_vals, n_pairs) + val_base
    q = int(rng.integers(n_pairs))
    pairs = np.empty(2 * n_pairs, dtype=np.int64)
    pairs[0::2] = keys
    pairs[1::2] = vals
    ids = np.concatenate([pairs, [SEP, keys[q], GEN, vals[q]]]).astype(np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    mask[-1] = True
    return TaskSample(ids, np.array([vals[q]], dtype=np.int64), mask,
                      "assoc_retrieval")


def _quadratic_strings(rng: np.random.Generator, max_root: int,
                       max_alpha: int, no_roots_frac: float):
    """Equation / step / answer strings for one sampled quadratic."""
    alpha = int(rng.integers(1, max_alpha + 1)) * (1 if rng.random() < 0.5 else -1)
    if rng.random() < no_roots_frac:
        # negative discriminant for the monic form, then scale by alpha
        bm = int(rng.integers(-2 * max_root, 2 * max_root + 1))
        low = bm * bm // 4 + 1
        cm = int(rng.integers(low, low + max_root * max_root))
        d = bm * bm - 4 * cm
        steps = [f"x^2{bm:+}*x{cm:+}=0",
                 f"D={abs(bm)}^2-4*1*{cm}={d}",
                 "", ""]
        answer = None
    else:
        x1 = int(rng.integers(-max_root, max_root + 1))
        x2 = int(rng.integers(-max_root, max_root + 1))
        x1, x2 = min(x1, x2), max(x1, x2)
        bm = -(x1 + x2)
        cm = x1 * x2
        d = bm * bm - 4 * cm
        s = math.isqrt(d)
        steps = [f"x^2{bm:+}*x{cm:+}=0",
                 f"D={abs(bm)}^2-4*1*{cm}={d}={s}^2",
                 f"x=({-bm}-{s})/2={x1}",
                 f"x=({-bm}+{s})/2={x2}"]
        answer = f"{x1},{x2}"
    a, b, c = alpha, alpha * bm, alpha * cm
    equation = f"{a}*x^2{b:+}*x{c:+}=0"
    return equation, steps, answer


def gen_quadratic(seed: int, max_root: int = 100, max_alpha: int = 10,
                  no_roots_frac: float = 0.2, step_len: int = 30) -> TaskSample:
    """Char-level quadratic sample: equation, solution steps, answer.

    Layout is six blocks of ``step_len`` tokens (180 total by default):
    the equation (followed by the start-to-generate token), four solution
    steps each terminated by ';', and the answer ("x1,x2" ascending, or
    the single no-roots token).  Blocks are right-padded with the pad id;
    all blocks after the first are target positions.
    """
    rng = np.random.default_rng(seed)
    vocab = Vocab.quadratic()
    equation, steps, answer = _quadratic_strings(rng, max_root, max_alpha,
                                                 no_roots_frac)

    def block(tokens):
        if len(tokens) > step_len:
            raise ContractError(f"quadratic block overflows {step_len} tokens")
        return np.concatenate([tokens,
                               np.full(step_len - len(tokens), PAD, np.int64)])

    blocks = [block(np.concatenate([vocab.encode(equation), [GEN]]))]
    for s in steps:
        blocks.append(block(vocab.encode(s + ";") if s else np.empty(0, np.int64)))
    if answer is None:
        ans_tokens = np.array([vocab._index[NO_ROOTS]], dtype=np.int64)
    else:
        ans_tokens = vocab.encode(answer)
    blocks.append(block(ans_tokens))

    ids = np.concatenate(blocks)
    mask = np.zeros(ids.shape, dtype=bool)
    mask[step_len:] = True
    return TaskSample(ids, ids[step_len:].copy(), mask, "quadratic")


def quadratic_answer(sample: TaskSample, step_len: int = 30) -> str:
    """Decode the pad-stripped answer block of a quadratic sample."""
    vocab = Vocab.quadratic()
    block = sample.input_ids[-step_len:]
    return vocab.decode(block[block != PAD])


def make_sample(task: str, seed: int, opts: dict) -> TaskSample:
    if task == "copy":
        return gen_copy(opts["src_len"], opts.get("vocab_payload", 16), seed)
    if task == "reverse":
        return gen_reverse(opts["src_len"], opts.get("vocab_payload", 16), seed)
    if task == "assoc_retrieval":
        return gen_assoc_retrieval(opts.get("n_pairs", 4),
                                   opts.get("n_keys", 26),
                                   opts.get("n_vals", 26), seed)
    if task == "quadratic":
        return gen_quadratic(seed, opts.get("max_root", 100),
                             opts.get("max_alpha", 10),
                             opts.get("no_roots_frac", 0.2),
                             opts.get("step_len", 30))
    raise ContractError(f"unknown task {task!r}")


def task_vocab(task: str, opts: dict) -> Vocab:
    if task in ("copy", "reverse"):
        return Vocab.payload(opts.get("vocab_payload", 16))
    if task == "assoc_retrieval":
        return Vocab.assoc(opts.get("n_keys", 26), opts.get("n_vals", 26))
    if task == "quadratic":
        return Vocab.quadratic()
    raise ContractError(f"unknown task {task!r}")


def split_seed_ranges(base_seed: int, n_train: int, n_val: int, n_test: int):
    """Disjoint per-split seed ranges (start, stop)."""
    t0 = base_seed
    v0 = t0 + n_train
    s0 = v0 + n_val
    return (t0, v0), (v0, s0), (s0, s0 + n_test)


# -- metrics ------------------------------------------------------------------


def per_char_accuracy(predictions: np.ndarray, targets: np.ndarray,
                      mask: np.ndarray) -> float:
    """Fraction of masked positions with the correct argmax token."""
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if predictions.shape != targets.shape or mask.shape != targets.shape:
        raise ContractError("per_char_accuracy: shape mismatch")
    n = int(mask.sum())
    if n == 0:
        raise ContractError("per_char_accuracy: empty mask")
    return float(((predictions == targets) & mask).sum() / n)


def solve_rate(generated: list, reference: list) -> float:
    """Exact full-answer match rate."""
    if len(generated) != len(reference):
        raise ContractError("solve_rate: list lengths differ")
    if not reference:
        return 0.0
    return sum(g == r for g, r in zip(generated, reference)) / len(reference)


def lm_metrics(mean_loss_nats: float):
    """(perplexity, bits per character) from a mean token loss in nats."""
    return math.exp(mean_loss_nats), mean_loss_nats / math.log(2)


# -- dataset files ------------------------------------------------------------


def write_dataset(path, samples: list, header: dict):
    """One sample per line: 'input_ids | target_ids | mask_bits'."""
    head = " ".join(f"{k}={v}" for k, v in header.items())
    lines = [f"# {head}"]
    for s in samples:
        lines.append(" ".join(map(str, s.input_ids)) + " | "
                     + " ".join(map(str, s.target_ids)) + " | "
                     + " ".join(str(int(b)) for b in s.loss_mask))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    import os
    os.replace(tmp, path)


def read_dataset(path):
    """Returns (samples, header dict)."""
    samples = []
    header = {}
    with open(path) as f:
        first = f.readline().strip()
        if not first.startswith("# "):
            raise ContractError(f"dataset {path}: missing header line")
        for kv in first[2:].split():
            k, _, v = kv.partition("=")
            header[k] = v
        task = header.get("task", "?")
        for line in f:
            line = line.strip()
            if not line:
                continue
            a, b, c = line.split(" | ")
            samples.append(TaskSample(
                np.array(a.split(), dtype=np.int64),
                np.array(b.split(), dtype=np.int64) if b.strip() else np.empty(0, np.int64),
                np.array(c.split(), dtype=np.int64).astype(bool),
                task))
    return samples, header


# -- tiny character LM --------------------------------------------------------


def load_corpus(path=None) -> str:
    if path is not None:
        with open(path) as f:
            return f.read()
    return resources.files("rmtlab").joinpath("data/tiny_corpus.txt").read_text()


def lm_samples(text: str, vocab: Vocab, sample_len: int) -> list:
    """Non-overlapping windows of the corpus; every position is a target
    except the first (it has no preceding context inside the window)."""
    ids = vocab.encode(text)
    out = []
    n = (len(ids) - 1) // sample_len
    for i in range(n):
        w = ids[i * sample_len:(i + 1) * sample_len].copy()
        mask = np.ones(sample_len, dtype=bool)
        mask[0] = False
        out.append(TaskSample(w, w[1:].copy(), mask, "lm"))
    return out


def lm_splits(text: str, train_frac=0.8, val_frac=0.1):
    n = len(text)
    a = int(n * train_frac)
    b = int(n * (train_frac + val_frac))
    return text[:a], text[a:b], text[b:]
