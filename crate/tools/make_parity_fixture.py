#!/usr/bin/env python3
"""Writes the cross-implementation parity fixtures.

Each fixture is an LGTC container holding a small random ViT in the engine's
weight layout plus three extra tensors:

    parity.input    [3, S, S]  preprocessed image tensor
    parity.z_final  [T, d]     token matrix after the last block
    parity.logits   [C]        scores of the "text" classifier

The reference forward below is plain numpy and shares no code with the Rust
engine. Weights come from numpy's PCG64 generator with a fixed seed, so
re-running the script reproduces the files byte for byte.

    python3 tools/make_parity_fixture.py fixtures/
"""

import json
import struct
import sys
from pathlib import Path

import numpy as np

ALIGN = 64
LABELS = ["cat", "dog", "car"]
CLIP_MEAN = [0.48145466, 0.4578275, 0.40821073]
CLIP_STD = [0.26862954, 0.26130258, 0.27577711]


def align_up(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_container(path, metadata, tensors):
    entries, cursor = [], 0
    for name, arr in tensors:
        dtype = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}[arr.dtype]
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": cursor, "nbytes": arr.nbytes}
        )
        cursor = align_up(cursor + arr.nbytes)
    header = {"format_version": 1, "metadata": metadata, "payload_len": cursor, "tensors": entries}
    blob = json.dumps(header, separators=(",", ":")).encode()
    blob += b" " * (align_up(16 + len(blob)) - 16 - len(blob))
    payload = bytearray(cursor)
    for (_, arr), e in zip(tensors, entries):
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        payload[e["offset"] : e["offset"] + len(raw)] = raw
    with open(path, "wb") as f:
        f.write(b"LGTC" + struct.pack("<IQ", 1, len(blob)) + blob + bytes(payload))


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def build(seed, pooling, L=2, h=2, d=8, p=4, side=2):
    rng = np.random.default_rng(seed)
    s = p * side
    n = side * side
    t = n + (pooling == "cls_token")
    hidden = 2 * d

    def u(*shape, scale=1.0 / np.sqrt(d)):
        return rng.uniform(-1.0, 1.0, size=shape) * scale

    w = {"patch_embed.weight": u(d, 3, p, p, scale=1.0 / np.sqrt(3 * p * p)), "patch_embed.bias": u(d)}
    if pooling == "cls_token":
        w["cls_token"] = u(d)
    w["pos_embed"] = u(t, d)
    for l in range(L):
        b = f"blocks.{l}"
        w[f"{b}.norm1.weight"] = 1.0 + 0.5 * u(d, scale=1.0)
        w[f"{b}.norm1.bias"] = u(d)
        w[f"{b}.attn.qkv.weight"] = u(3 * d, d)
        w[f"{b}.attn.qkv.bias"] = u(3 * d)
        w[f"{b}.attn.proj.weight"] = u(d, d)
        w[f"{b}.attn.proj.bias"] = u(d)
        w[f"{b}.norm2.weight"] = 1.0 + 0.5 * u(d, scale=1.0)
        w[f"{b}.norm2.bias"] = u(d)
        w[f"{b}.mlp.fc1.weight"] = u(hidden, d)
        w[f"{b}.mlp.fc1.bias"] = u(hidden)
        w[f"{b}.mlp.fc2.weight"] = u(d, hidden)
        w[f"{b}.mlp.fc2.bias"] = u(d)
    w["norm.weight"] = 1.0 + 0.5 * u(d, scale=1.0)
    w["norm.bias"] = u(d)
    w["proj"] = u(d, d)
    if pooling == "attn_pooler":
        w["pool.query"] = u(d, scale=1.0)
        w["pool.key.weight"] = u(d, d)
        w["pool.value.weight"] = u(d, d)
    cls = rng.normal(size=(d, len(LABELS)))
    w["classifier.text"] = cls / np.linalg.norm(cls, axis=0, keepdims=True)
    empty = rng.normal(size=d)
    w["embedding.empty"] = empty / np.linalg.norm(empty)
    image = rng.uniform(-2.0, 2.0, size=(3, s, s))
    config = {
        "layers": L,
        "heads": h,
        "width": d,
        "patch_size": p,
        "image_size": s,
        "mlp_ratio": 2.0,
        "pooling": pooling,
        "class_token": pooling == "cls_token",
        "ln_eps": 1e-5,
        "gelu": "tanh",
    }
    return config, w, image


def forward(config, w, image):
    L, h, d, p = config["layers"], config["heads"], config["width"], config["patch_size"]
    side = config["image_size"] // p
    dh = d // h
    patches = image.reshape(3, side, p, side, p).transpose(1, 3, 0, 2, 4).reshape(side * side, 3 * p * p)
    z = patches @ w["patch_embed.weight"].reshape(d, -1).T + w["patch_embed.bias"]
    if "cls_token" in w:
        z = np.concatenate([w["cls_token"][None, :], z])
    z = z + w["pos_embed"]
    for l in range(L):
        b = f"blocks.{l}."
        x = layer_norm(z, w[b + "norm1.weight"], w[b + "norm1.bias"])
        qkv = x @ w[b + "attn.qkv.weight"].T + w[b + "attn.qkv.bias"]
        q, k, v = (qkv[:, i * d : (i + 1) * d].reshape(-1, h, dh).transpose(1, 0, 2) for i in range(3))
        a = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh).astype(z.dtype))
        mixed = (a @ v).transpose(1, 0, 2).reshape(-1, d)
        z = z + mixed @ w[b + "attn.proj.weight"].T + w[b + "attn.proj.bias"]
        x = layer_norm(z, w[b + "norm2.weight"], w[b + "norm2.bias"])
        z = z + gelu(x @ w[b + "mlp.fc1.weight"].T + w[b + "mlp.fc1.bias"]) @ w[b + "mlp.fc2.weight"].T + w[
            b + "mlp.fc2.bias"
        ]
    normed = layer_norm(z, w["norm.weight"], w["norm.bias"])
    if config["pooling"] == "cls_token":
        pooled = normed[0]
    else:
        keys = (normed @ w["pool.key.weight"].T).reshape(-1, h, dh).transpose(1, 0, 2)
        values = (normed @ w["pool.value.weight"].T).reshape(-1, h, dh).transpose(1, 0, 2)
        qp = w["pool.query"].reshape(h, 1, dh)
        a = softmax(qp @ keys.transpose(0, 2, 1) / np.sqrt(dh).astype(z.dtype))
        pooled = (a @ values).reshape(d)
    emb = pooled @ w["proj"]
    logits = (emb / np.linalg.norm(emb)) @ w["classifier.text"]
    return z, logits


def fixture(out_dir, name, seed, pooling, dtype):
    config, w, image = build(seed, pooling)
    w = {k: v.astype(dtype) for k, v in w.items()}
    image = image.astype(dtype)
    z, logits = forward(config, w, image)
    metadata = {
        "layout": "legrad-vit-v1",
        "model": config,
        "preprocess": {"resize": "bilinear", "crop": "center", "mean": CLIP_MEAN, "std": CLIP_STD},
        "patch_order": "row-major",
        "provenance": f"numpy parity fixture seed={seed} pooling={pooling} dtype={np.dtype(dtype).name}",
        "classifiers": [{"name": "text", "kind": "text_embeddings", "labels": LABELS}],
        "embeddings": ["empty"],
        "parity": {"classifier": "text"},
    }
    tensors = list(w.items()) + [
        ("parity.input", image),
        ("parity.z_final", z.astype(dtype)),
        ("parity.logits", logits.astype(dtype)),
    ]
    write_container(Path(out_dir) / name, metadata, tensors)


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "fixtures")
    out.mkdir(parents=True, exist_ok=True)
    for pooling, tag in [("cls_token", "cls"), ("attn_pooler", "pool")]:
        for dtype, suffix in [(np.float64, "f64"), (np.float32, "f32")]:
            fixture(out, f"parity_{tag}_{suffix}.lgtc", 0, pooling, dtype)


if __name__ == "__main__":
    main()
