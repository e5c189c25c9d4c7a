"""Memory mechanisms: token memory, the per-layer state cache, and both.

A mechanism is an input/output transformation around the backbone: it
decides what gets concatenated to a segment before the stack runs and
what state is carried to the next segment afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor, concat, detach, slice_axis

MECHANISM_KINDS = ("baseline", "mt", "trxl", "rmt", "trxl_rmt")


@dataclass
class MechanismKind:
    """Mechanism selector plus its size hyperparameters."""

    kind: str
    m: int = 0
    m_cache: int = 0
    k_bptt: int = 0

    def __post_init__(self):
        if self.kind not in MECHANISM_KINDS:
            raise ValueError(f"unknown mechanism kind {self.kind!r}")
        if self.m < 0 or self.m_cache < 0:
            raise ValueError("memory sizes must be non-negative")
        if not 0 <= self.k_bptt <= 4:
            raise ValueError("k_bptt must be in 0..4")
        if self.kind == "baseline" and (self.m or self.m_cache):
            raise ValueError("baseline requires m == 0 and m_cache == 0")
        if self.kind == "mt" and self.m_cache:
            raise ValueError("mt requires m_cache == 0")
        if self.kind == "trxl" and self.m:
            raise ValueError("trxl requires m == 0")
        if self.kind == "rmt" and self.m_cache:
            raise ValueError("rmt requires m_cache == 0")

    @property
    def uses_token_memory(self):
        return self.kind in ("mt", "rmt", "trxl_rmt") and self.m > 0

    @property
    def carries_memory(self):
        return self.kind in ("rmt", "trxl_rmt") and self.m > 0

    @property
    def uses_cache(self):
        return self.kind in ("trxl", "trxl_rmt") and self.m_cache > 0


@dataclass
class LayerCache:
    """Per-layer detached hidden states from previous segments."""

    entries: list = field(default_factory=list)

    @property
    def width(self) -> int:
        if not self.entries:
            return 0
        return self.entries[0].shape[1]

    @property
    def stored_vectors(self) -> int:
        """Total cached state count across layers (width x n_layers)."""
        return sum(e.shape[1] for e in self.entries)


def init_memory(m: int, d_model: int, rng: np.random.Generator,
                dtype=np.float64) -> Tensor:
    """Trainable initial memory: m learned vectors used for segment 1."""
    if m < 1:
        raise ContractError("init_memory: m must be >= 1")
    return Tensor(rng.normal(0.0, 0.02, (m, d_model)).astype(dtype),
                  requires_grad=True)


def augment_segment(mem: Tensor, h0: Tensor) -> Tensor:
    """[memory | segment | memory]; the same tensor fills both copies."""
    return concat([mem, h0, mem], axis=1)


def mt_augment(mem: Tensor, h0: Tensor) -> Tensor:
    """Prepend-only memory; nothing is carried between segments."""
    return concat([mem, h0], axis=1)


def split_outputs(h_out: Tensor, m: int, L: int):
    """Split backbone output into (read_out, sequence, write_out)."""
    if h_out.shape[1] != 2 * m + L:
        raise ContractError(f"split_outputs: expected length {2 * m + L}, "
                            f"got {h_out.shape[1]}")
    return (slice_axis(h_out, 1, 0, m),
            slice_axis(h_out, 1, m, m + L),
            slice_axis(h_out, 1, m + L, 2 * m + L))


def carry_memory(write_out: Tensor) -> Tensor:
    """Identity hand-off: the write block becomes the next segment's memory."""
    return write_out


def update_cache(cache: LayerCache | None, layer_inputs: list,
                 m_cache: int) -> LayerCache:
    """Slide the per-layer cache window over the newest hidden states.

    Keeps the last ``m_cache`` positions of (old cache + current segment)
    per layer; every stored entry is detached, so no gradient ever flows
    into a previous segment through the cache.
    """
    if m_cache == 0:
        return LayerCache()
    entries = []
    for i, h in enumerate(layer_inputs):
        if cache is not None and cache.entries:
            joint = concat([cache.entries[i], h], axis=1)
        else:
            joint = h
        width = joint.shape[1]
        start = max(0, width - m_cache)
        entries.append(detach(slice_axis(joint, 1, start, width)))
    return LayerCache(entries=entries)
