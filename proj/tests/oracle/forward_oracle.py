#!/usr/bin/env python3
"""Independent numpy forward pass for tinyformer weight files.

Reads the weight file directly and recomputes the decoder stack from the
architecture description (pre-norm blocks, scaled factored attention with a
causal mask, exact-erf GELU feed-forward of width 4d, final norm, LM head).

usage: forward_oracle.py WEIGHTS TOKENS [--compare FILE] [--tol 1e-6]

TOKENS is a comma separated id list. Without --compare the next-token
log-probabilities are printed one per line with 17 significant digits. With
--compare the file must hold the same number of lines; exit status is 0 iff
every entry agrees within the tolerance.
"""
import argparse
import math
import struct
import sys

import numpy as np


def load(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != b"TNYF":
        raise SystemExit("bad magic")
    version, vocab, d, layers, heads, head_dim, ctx = struct.unpack_from("<7I", raw, 4)
    (seed, count) = struct.unpack_from("<2Q", raw, 32)
    assert version == 1
    values = np.frombuffer(raw, dtype="<f4", offset=48).astype(np.float64)
    assert values.size == count
    pos = 0

    def take(*shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = values[pos:pos + n].reshape(shape)
        pos += n
        return out

    w = {"tok": take(vocab, d), "pos": take(ctx, d), "layers": []}
    for _ in range(layers):
        w["layers"].append({
            "g1": take(d), "b1": take(d),
            "q": take(d, d), "k": take(d, d), "v": take(d, d), "o": take(d, d),
            "g2": take(d), "b2": take(d),
            "w1": take(d, 4 * d), "c1": take(4 * d),
            "w2": take(4 * d, d), "c2": take(d),
        })
    w["gf"] = take(d)
    w["bf"] = take(d)
    w["lm"] = take(d, vocab)
    assert pos == values.size
    w["heads"] = heads
    w["head_dim"] = head_dim
    return w


def norm(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def gelu(x):
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def forward(w, tokens):
    n = len(tokens)
    x = w["tok"][tokens] + w["pos"][:n]
    hd = w["head_dim"]
    mask = np.triu(np.full((n, n), -np.inf), k=1)
    for lw in w["layers"]:
        h = norm(x, lw["g1"], lw["b1"])
        q, k, v = h @ lw["q"], h @ lw["k"], h @ lw["v"]
        mixed = np.zeros_like(x)
        for i in range(w["heads"]):
            sl = slice(i * hd, (i + 1) * hd)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(hd) + mask
            s = np.exp(s - s.max(axis=1, keepdims=True))
            a = s / s.sum(axis=1, keepdims=True)
            mixed[:, sl] = a @ v[:, sl]
        x = x + mixed @ lw["o"]
        h = norm(x, lw["g2"], lw["b2"])
        x = x + gelu(h @ lw["w1"] + lw["c1"]) @ lw["w2"] + lw["c2"]
    logits = norm(x, w["gf"], w["bf"]) @ w["lm"]
    last = logits[-1]
    return last - (last.max() + np.log(np.exp(last - last.max()).sum()))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("weights")
    ap.add_argument("tokens")
    ap.add_argument("--compare")
    ap.add_argument("--tol", type=float, default=1e-6)
    args = ap.parse_args()
    w = load(args.weights)
    lp = forward(w, [int(t) for t in args.tokens.split(",")])
    if not args.compare:
        for v in lp:
            print(f"{v:.17g}")
        return 0
    with open(args.compare) as fh:
        theirs = np.array([float(line) for line in fh if line.strip()])
    if theirs.shape != lp.shape:
        print(f"shape mismatch {theirs.shape} vs {lp.shape}")
        return 1
    err = float(np.max(np.abs(theirs - lp)))
    print(f"max abs difference {err:.3e} (tolerance {args.tol:g})")
    return 0 if err <= args.tol else 1


if __name__ == "__main__":
    sys.exit(main())
