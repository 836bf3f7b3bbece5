"""Smoke test for the pytokenfuse extension.

Build and run:
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/pytokenfuse-*.whl
    python3 python/smoke_test.py
"""

import os
import struct
import sys
import tempfile

import pytokenfuse as tf

MAGIC = b"FMAP1"


def write_fmap(path, blocks, maps, h, w, c):
    """Writes feature maps the way an encoder-side exporter would."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HIIII", 1, len(maps), h, w, c))
        f.write(struct.pack(f"<{len(blocks)}I", *blocks))
        f.write(struct.pack("<B", 0))
        for m in maps:
            f.write(struct.pack(f"<{len(m)}f", *m))


def read_fmap(data):
    assert data[:5] == MAGIC, data[:5]
    version, m, h, w, c = struct.unpack_from("<HIIII", data, 5)
    off = 5 + 18
    blocks = list(struct.unpack_from(f"<{m}I", data, off))
    off += 4 * m
    (dtype,) = struct.unpack_from("<B", data, off)
    off += 1
    n = h * w * c
    maps = [list(struct.unpack_from(f"<{n}f", data, off + 4 * n * i)) for i in range(m)]
    assert off + 4 * n * m == len(data), "trailing bytes"
    return version, blocks, (m, h, w, c), dtype, maps


def check(cond, what):
    if not cond:
        print(f"FAIL  {what}")
        sys.exit(1)
    print(f"ok    {what}")


def main():
    cfg = tf.FusionConfig("toy")
    check(cfg.token_count() == 16, f"toy config gives 16 tokens ({cfg!r})")
    check(tf.FusionConfig(k=1).token_count() == 576, "paper config at k=1 gives 576 tokens")
    check(tf.select_block_indices(24, 8) == [3, 6, 9, 12, 15, 18, 21, 24], "block selection")

    try:
        tf.FusionConfig("toy", k=3)
        check(False, "bad kernel rejected")
    except ValueError as e:
        check(True, f"bad kernel rejected: {e}")

    stack = tf.gen_features(7, cfg)
    m, h, w, c = stack.shape
    check((m, h, w, c) == (cfg.m, cfg.h1, cfg.w1, cfg.c1), f"feature stack shape {stack.shape}")

    # Rust bytes parse with the Python reader, Python bytes parse in Rust.
    version, blocks, shape, dtype, maps = read_fmap(stack.to_bytes())
    check(version == 1 and dtype == 0 and shape == stack.shape, "python reads rust FMAP1 header")
    check(blocks == stack.block_indices, "block indices agree")
    check(maps[0] == stack.map_values(0), "payload agrees")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "features.fmap")
        write_fmap(path, blocks, maps, h, w, c)
        loaded = tf.FeatureStack.load(path)
        check(loaded.to_bytes() == stack.to_bytes(), "rust reads python-written FMAP1 byte for byte")

        with open(path, "ab") as f:
            f.write(b"\0")
        try:
            tf.FeatureStack.load(path)
            check(False, "trailing bytes rejected")
        except ValueError as e:
            check(True, f"trailing bytes rejected: {e}")
        try:
            tf.FeatureStack.load(os.path.join(d, "missing.fmap"))
            check(False, "missing file raises OSError")
        except OSError:
            check(True, "missing file raises OSError")

    params = tf.ModuleParams(cfg, "stf")
    tokens = tf.forward(stack, params, cfg)
    check((len(tokens), tokens.width) == (16, cfg.c3), f"forward gives {tokens!r}")
    again = tf.forward(tf.FeatureStack.from_bytes(stack.to_bytes()), params, cfg)
    check(tokens.tolist() == again.tolist(), "forward is deterministic across file round trip")
    _, _, tshape, _, _ = read_fmap(tokens.to_bytes())
    check(tshape == (1, 1, 16, cfg.c3), "token file shape")

    for kind, n in [("avgpool", 16), ("tokenconcat", 16)]:
        out = tf.forward(stack, tf.ModuleParams(cfg, kind), cfg)
        check(len(out) == n, f"{kind} gives {n} tokens")

    rows = tf.table4_grid()
    check([(r["k"], r["e"]) for r in rows] == [(1, 1), (2, 1), (2, 2), (4, 4), (4, 8), (8, 16), (8, 32)], "grid rows")
    check(abs(rows[1]["tflops"] - 1.9296) < 1e-3, f"k=2 E=1 prefill {rows[1]['tflops']:.4f} TFLOPs")
    check(tf.llm_prefill_flops(tf.DEFAULT_LLM_PARAMS, 144) == 1_929_600_000_000, "prefill formula")

    g = tf.check_gradients("mbtf", seed=0)
    check(g["passed"], f"mbtf gradients, worst {g['max_rel_error']:.2e} over {len(g['blocks'])} blocks")

    losses = tf.toy_train(seed=0, steps=20)
    check(len(losses) == 21 and losses[-1] < losses[0], f"toy loss {losses[0]:.3f} -> {losses[-1]:.3f}")
    try:
        tf.toy_train(lr=1e30, steps=5)
        check(False, "divergence raises ArithmeticError")
    except ArithmeticError:
        check(True, "divergence raises ArithmeticError")

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
