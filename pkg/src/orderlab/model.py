"""Miniature transformer cross-encoder with switchable position information.

BERT-style post-layer-norm encoder: token + segment (+ optionally
learned position) embeddings, multi-head self-attention with padding
mask, GELU feed-forward, and a binary relevance classifier on the final
[CLS] state. With position_mode="none" the position table and every
position-index input are absent, so the forward pass is structurally
invariant to within-span reordering.

Forward and backward passes are hand-written in numpy; `train.grad_check`
verifies the analytic gradients against central finite differences.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import erf as scipy_erf

from .tokenizer import TokenizedPair, PAD_ID

LN_EPS = 1e-12
_MAGIC = b"ORDERLAB-CKPT\n"
_VERSION = 1


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    hidden: int = 32
    ff_dim: int = 64
    vocab_size: int = 1000
    max_len: int = 64
    n_segments: int = 2
    dropout_rate: float = 0.0
    position_mode: str = "learned"  # learned | none
    numeric_precision: int = 64  # 32 | 64
    init_scale: float = 0.02

    def validate(self):
        if self.hidden % self.n_heads != 0:
            raise ValueError("hidden must be divisible by n_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.position_mode not in ("learned", "none"):
            raise ValueError(f"unknown position_mode {self.position_mode!r}")
        if self.numeric_precision not in (32, 64):
            raise ValueError("numeric_precision must be 32 or 64")
        for name in ("n_layers", "n_heads", "hidden", "ff_dim", "vocab_size", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def dtype(self):
        return np.float64 if self.numeric_precision == 64 else np.float32

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class ForwardOutput:
    logits: np.ndarray            # [B, 2]
    relevance_prob: np.ndarray    # [B], softmax(logits)[:, 1]
    activations: list[np.ndarray] | None = None  # L+1 arrays [B, T, d]
    cls_states: list[np.ndarray] | None = None   # L+1 arrays [B, d]


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, ff = cfg.hidden, cfg.ff_dim
    shapes = {
        "tok_emb": (cfg.vocab_size, d),
        "seg_emb": (cfg.n_segments, d),
        "emb_ln_g": (d,),
        "emb_ln_b": (d,),
        "cls_W": (d, 2),
        "cls_b": (2,),
    }
    if cfg.position_mode == "learned":
        shapes["pos_emb"] = (cfg.max_len, d)
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        shapes.update({
            p + "Wq": (d, d), p + "bq": (d,),
            p + "Wk": (d, d), p + "bk": (d,),
            p + "Wv": (d, d), p + "bv": (d,),
            p + "Wo": (d, d), p + "bo": (d,),
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "W1": (d, ff), p + "b1": (ff,),
            p + "W2": (ff, d), p + "b2": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
        })
    return shapes


def init(cfg: ModelConfig, seed: int) -> Model:
    """Deterministic init: scaled-normal weights, zero biases, unit LN gains."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(("_g",)):
            arr = np.ones(shape)
        elif name.endswith(("_b", "bq", "bk", "bv", "bo", "b1", "b2")) or name == "cls_b":
            arr = np.zeros(shape)
        elif name == "pos_emb":
            # position embeddings start an order of magnitude smaller than
            # token embeddings: token identity then dominates the early
            # input geometry and positional structure is grown by the
            # optimizer only where the task rewards it
            arr = rng.normal(0.0, cfg.init_scale * 0.1, size=shape)
        else:
            arr = rng.normal(0.0, cfg.init_scale, size=shape)
        params[name] = arr.astype(cfg.dtype)
    return Model(cfg, params)


# ---------------------------------------------------------------------------
# batch assembly


def pad_batch(pairs: list[TokenizedPair], dtype=np.float64):
    """Stack pairs into ids/segments/mask arrays padded with [PAD]."""
    T = max(p.n_total for p in pairs)
    B = len(pairs)
    ids = np.full((B, T), PAD_ID, dtype=np.int64)
    segs = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=dtype)
    for i, p in enumerate(pairs):
        n = p.n_total
        ids[i, :n] = p.ids
        segs[i, :n] = p.segments
        mask[i, :n] = 1.0
    return ids, segs, mask


# ---------------------------------------------------------------------------
# numerics


def _erf(x):
    # exact (erf-based) GELU; a tanh approximation is not accurate enough
    # for 1e-4 finite-difference gradient checks
    return scipy_erf(x)


def gelu(x):
    return 0.5 * x * (1.0 + _erf(x / np.asarray(math.sqrt(2.0), dtype=x.dtype)))


def gelu_grad(x):
    phi = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + _erf(x / np.asarray(math.sqrt(2.0), dtype=x.dtype))) + x * phi


def layer_norm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def layer_norm_bwd(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def softmax(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


# ---------------------------------------------------------------------------
# forward / backward


def _split_heads(x, n_heads):
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _forward(model: Model, ids, segs, mask, train_mode=False, rng=None, capture=False):
    """Run the encoder; returns (logits, activations, tape for backward)."""
    cfg = model.config
    P = model.params
    B, T = ids.shape
    if T > cfg.max_len:
        raise ValueError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise ValueError("token id out of range")

    drop = cfg.dropout_rate if train_mode else 0.0
    tape: dict = {"ids": ids, "segs": segs, "mask": mask, "drop": drop, "layers": []}

    emb = P["tok_emb"][ids] + P["seg_emb"][segs]
    if cfg.position_mode == "learned":
        emb = emb + P["pos_emb"][:T][None, :, :]
    h, ln_cache = layer_norm_fwd(emb, P["emb_ln_g"], P["emb_ln_b"])
    h, keep = _dropout(h, drop, rng)
    tape["emb_ln"] = ln_cache
    tape["emb_keep"] = keep

    acts = [h] if capture else None
    # additive key mask: 0 where attendable, -inf where padded
    neg = np.where(mask[:, None, None, :] > 0, 0.0, -np.inf).astype(cfg.dtype)
    scale = 1.0 / math.sqrt(cfg.head_dim)

    for l in range(cfg.n_layers):
        p = f"layer{l}."
        lt: dict = {"h_in": h}
        q = h @ P[p + "Wq"] + P[p + "bq"]
        k = h @ P[p + "Wk"] + P[p + "bk"]
        v = h @ P[p + "Wv"] + P[p + "bv"]
        qh, kh, vh = (_split_heads(x, cfg.n_heads) for x in (q, k, v))
        scores = qh @ kh.transpose(0, 1, 3, 2) * scale + neg
        A = softmax(scores)
        A_d, a_keep = _dropout(A, drop, rng)
        ctx = _merge_heads(A_d @ vh)
        attn = ctx @ P[p + "Wo"] + P[p + "bo"]
        attn, o_keep = _dropout(attn, drop, rng)
        h1, ln1_cache = layer_norm_fwd(h + attn, P[p + "ln1_g"], P[p + "ln1_b"])

        z = h1 @ P[p + "W1"] + P[p + "b1"]
        a = gelu(z)
        ff = a @ P[p + "W2"] + P[p + "b2"]
        ff, f_keep = _dropout(ff, drop, rng)
        h2, ln2_cache = layer_norm_fwd(h1 + ff, P[p + "ln2_g"], P[p + "ln2_b"])

        lt.update(qh=qh, kh=kh, vh=vh, A=A, A_d=A_d, a_keep=a_keep, ctx=ctx,
                  o_keep=o_keep, ln1=ln1_cache, h1=h1, z=z, a=a, f_keep=f_keep,
                  ln2=ln2_cache)
        tape["layers"].append(lt)
        h = h2
        if capture:
            acts.append(h)

    tape["h_final"] = h
    logits = h[:, 0, :] @ P["cls_W"] + P["cls_b"]
    return logits, acts, tape


def _backward(model: Model, tape, dlogits):
    """Backpropagate dloss/dlogits through the tape; returns grad dict."""
    cfg = model.config
    P = model.params
    grads = {name: np.zeros_like(p) for name, p in model.params.items()}
    ids, segs = tape["ids"], tape["segs"]
    B, T = ids.shape
    scale = 1.0 / math.sqrt(cfg.head_dim)

    h = tape["h_final"]
    grads["cls_W"] += h[:, 0, :].T @ dlogits
    grads["cls_b"] += dlogits.sum(axis=0)
    dh = np.zeros_like(h)
    dh[:, 0, :] = dlogits @ P["cls_W"].T

    for l in range(cfg.n_layers - 1, -1, -1):
        p = f"layer{l}."
        lt = tape["layers"][l]

        dsum2, dg2, db2 = layer_norm_bwd(dh, lt["ln2"])
        grads[p + "ln2_g"] += dg2
        grads[p + "ln2_b"] += db2
        dh1 = dsum2.copy()
        dff = dsum2
        if lt["f_keep"] is not None:
            dff = dff * lt["f_keep"]
        a2d = lt["a"].reshape(-1, cfg.ff_dim)
        dff2d = dff.reshape(-1, cfg.hidden)
        grads[p + "W2"] += a2d.T @ dff2d
        grads[p + "b2"] += dff2d.sum(axis=0)
        da = dff @ P[p + "W2"].T
        dz = da * gelu_grad(lt["z"])
        h12d = lt["h1"].reshape(-1, cfg.hidden)
        dz2d = dz.reshape(-1, cfg.ff_dim)
        grads[p + "W1"] += h12d.T @ dz2d
        grads[p + "b1"] += dz2d.sum(axis=0)
        dh1 += dz @ P[p + "W1"].T

        dsum1, dg1, db1 = layer_norm_bwd(dh1, lt["ln1"])
        grads[p + "ln1_g"] += dg1
        grads[p + "ln1_b"] += db1
        dh_in = dsum1.copy()
        dattn = dsum1
        if lt["o_keep"] is not None:
            dattn = dattn * lt["o_keep"]
        ctx2d = lt["ctx"].reshape(-1, cfg.hidden)
        dattn2d = dattn.reshape(-1, cfg.hidden)
        grads[p + "Wo"] += ctx2d.T @ dattn2d
        grads[p + "bo"] += dattn2d.sum(axis=0)
        dctx = _split_heads(dattn @ P[p + "Wo"].T, cfg.n_heads)

        dA_d = dctx @ lt["vh"].transpose(0, 1, 3, 2)
        dvh = lt["A_d"].transpose(0, 1, 3, 2) @ dctx
        dA = dA_d * lt["a_keep"] if lt["a_keep"] is not None else dA_d
        A = lt["A"]
        dscores = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
        dqh = dscores @ lt["kh"] * scale
        dkh = dscores.transpose(0, 1, 3, 2) @ lt["qh"] * scale

        dq = _merge_heads(dqh)
        dk = _merge_heads(dkh)
        dv = _merge_heads(dvh)
        h_in2d = lt["h_in"].reshape(-1, cfg.hidden)
        for W, b, dx in ((p + "Wq", p + "bq", dq), (p + "Wk", p + "bk", dk),
                         (p + "Wv", p + "bv", dv)):
            dx2d = dx.reshape(-1, cfg.hidden)
            grads[W] += h_in2d.T @ dx2d
            grads[b] += dx2d.sum(axis=0)
            dh_in += dx @ P[W].T

        dh = dh_in

    if tape["emb_keep"] is not None:
        dh = dh * tape["emb_keep"]
    demb, dg, db = layer_norm_bwd(dh, tape["emb_ln"])
    grads["emb_ln_g"] += dg
    grads["emb_ln_b"] += db

    np.add.at(grads["tok_emb"], ids, demb)
    np.add.at(grads["seg_emb"], segs, demb)
    if cfg.position_mode == "learned":
        grads["pos_emb"][:T] += demb.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# public entry points


def forward(model: Model, pairs: list[TokenizedPair], capture=False,
            train_mode=False, rng=None) -> ForwardOutput:
    """Score a batch; `capture=True` records all per-layer hidden states."""
    ids, segs, mask = pad_batch(pairs, dtype=model.config.dtype)
    logits, acts, _ = _forward(model, ids, segs, mask, train_mode=train_mode,
                               rng=rng, capture=capture)
    probs = softmax(logits, axis=-1)[:, 1]
    out = ForwardOutput(logits=logits, relevance_prob=probs)
    if capture:
        out.activations = acts
        out.cls_states = [a[:, 0, :] for a in acts]
    return out


def loss_and_grads(model: Model, pairs: list[TokenizedPair], labels,
                   train_mode=False, rng=None):
    """Mean cross-entropy over the batch and gradients for every parameter."""
    ids, segs, mask = pad_batch(pairs, dtype=model.config.dtype)
    logits, _, tape = _forward(model, ids, segs, mask, train_mode=train_mode, rng=rng)
    B = logits.shape[0]
    probs = softmax(logits, axis=-1)
    y = np.asarray(labels, dtype=np.int64)
    loss = -np.log(np.clip(probs[np.arange(B), y], 1e-300, None)).mean()
    dlogits = probs.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    grads = _backward(model, tape, dlogits.astype(model.config.dtype))
    return float(loss), grads


def batch_loss(model: Model, pairs, labels) -> float:
    """Loss only (eval mode); used by the finite-difference gradient check."""
    ids, segs, mask = pad_batch(pairs, dtype=model.config.dtype)
    logits, _, _ = _forward(model, ids, segs, mask)
    B = logits.shape[0]
    probs = softmax(logits, axis=-1)
    y = np.asarray(labels, dtype=np.int64)
    return float(-np.log(np.clip(probs[np.arange(B), y], 1e-300, None)).mean())


def score(model: Model, pair: TokenizedPair) -> float:
    """Relevance probability in [0, 1] for a single encoded pair."""
    return float(forward(model, [pair]).relevance_prob[0])


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config JSON, named little-endian arrays


def save(model: Model, path):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        cfg_blob = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
        f.write(struct.pack("<Q", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            arr = model.params[name]
            name_b = name.encode("utf-8")
            dtype_code = b"f8" if arr.dtype == np.float64 else b"f4"
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(dtype_code)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<" + dtype_code.decode()).tobytes())


def load(path) -> Model:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError("not an orderlab checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<Q", f.read(8))
        cfg = ModelConfig(**json.loads(f.read(cfg_len).decode("utf-8")))
        cfg.validate()
        (n_params,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            dtype_code = f.read(2).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * int(dtype_code[1])), dtype="<" + dtype_code)
            params[name] = data.reshape(shape).astype(cfg.dtype)
    expected = _param_shapes(cfg)
    if set(params) != set(expected):
        raise ValueError("checkpoint parameter names do not match config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {shape}")
    return Model(cfg, params)
