"""Attention-map export: row-stochastic matrices as CSV plus PGM images."""

from __future__ import annotations

import json
import os

import numpy as np

from .backbone import ModelConfig
from .mechanisms import MechanismKind
from .trainer import run_recurrent_forward, split_into_segments


def write_pgm(path, weights: np.ndarray):
    """8-bit grayscale PGM; attention weight 1.0 maps to black (0)."""
    w = np.clip(weights, 0.0, 1.0)
    pix = 255 - np.round(w * 255).astype(int)
    rows, cols = pix.shape
    lines = [f"P2", f"{cols} {rows}", "255"]
    lines += [" ".join(map(str, r)) for r in pix]
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def dump_attention(params: dict, cfg: ModelConfig, mech: MechanismKind,
                   token_ids: np.ndarray, out_dir: str) -> list:
    """Export every (layer, head, segment) attention matrix for one sample.

    Writes ``layer{n}_head{h}_seg{t}.csv`` and ``.pgm`` files plus a
    ``layout.json`` sidecar annotating the cache/read/sequence/write spans
    of the key axis per segment.  Returns the list of written files.
    """
    os.makedirs(out_dir, exist_ok=True)
    seg = split_into_segments(np.asarray(token_ids)[None, :], cfg.segment_length)
    results, _ = run_recurrent_forward(params, cfg, mech, seg.segments,
                                       collect_attn=True)
    written = []
    layouts = {}
    for t, res in enumerate(results):
        lay = res.layout
        c = lay["cache"]
        spans = {"cache": [0, c]}
        if lay["read"]:
            spans["read"] = [c, c + lay["read"]]
            spans["sequence"] = [c + lay["read"], c + lay["read"] + lay["sequence"]]
            spans["write"] = [spans["sequence"][1], spans["sequence"][1] + lay["write"]]
        elif lay["mt_prefix"]:
            spans["memory_prefix"] = [c, c + lay["mt_prefix"]]
            spans["sequence"] = [c + lay["mt_prefix"], c + lay["mt_prefix"] + lay["sequence"]]
        else:
            spans["sequence"] = [c, c + lay["sequence"]]
        layouts[f"segment{t}"] = spans
        for n, attn in enumerate(res.attn):
            for h in range(attn.shape[1]):
                mat = attn[0, h]
                stem = os.path.join(out_dir, f"layer{n}_head{h}_seg{t}")
                np.savetxt(stem + ".csv", mat, delimiter=",", fmt="%.8g")
                write_pgm(stem + ".pgm", mat)
                written += [stem + ".csv", stem + ".pgm"]
    side = os.path.join(out_dir, "layout.json")
    with open(side, "w") as f:
        json.dump(layouts, f, indent=2, sort_keys=True)
    written.append(side)
    return written
