"""A small BERT-shaped transformer encoder with analytic gradients.

Everything is plain numpy: post-layer-norm blocks, GELU feed-forward,
learned positions, no segment embeddings (inputs are single sequences),
an MLM head whose output projection is tied to the token embeddings, and
a tanh pooler over the first position.

Two numeric modes are supported through the parameter dtype: float32 for
training and checkpoints, float64 ("wide") for finite-difference
gradient checks, where float32 rounding would swamp the comparison.

Every forward entry point can return a cache; :func:`backward` consumes
it and produces the exact analytic gradient of any loss expressed as
cotangents of the hidden states and pooled output.  Dropout draws come
from a counter-based generator keyed by (seed, step, site) so a training
step replays bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-12
INIT_STD = 0.02

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ConfigError(ValueError):
    """Raised when an encoder configuration violates a constraint."""


class CheckpointError(RuntimeError):
    """Raised for unreadable or inconsistent checkpoint files."""


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters."""

    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 128
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size < 6:
            raise ConfigError(f"vocab_size ({self.vocab_size}) must be >= 6")
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.n_layers < 1:
            raise ConfigError(f"n_layers ({self.n_layers}) must be >= 1")
        if self.d_ff < 1:
            raise ConfigError(f"d_ff ({self.d_ff}) must be >= 1")
        if self.max_len < 3:
            raise ConfigError(f"max_len ({self.max_len}) must be >= 3")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout ({self.dropout}) must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def expected_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor."""
    v, d, ff = config.vocab_size, config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_len, d),
        "emb_ln_g": (d,),
        "emb_ln_b": (d,),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        shapes[p + "attn_q_w"] = (d, d)
        shapes[p + "attn_q_b"] = (d,)
        shapes[p + "attn_k_w"] = (d, d)
        shapes[p + "attn_k_b"] = (d,)
        shapes[p + "attn_v_w"] = (d, d)
        shapes[p + "attn_v_b"] = (d,)
        shapes[p + "attn_o_w"] = (d, d)
        shapes[p + "attn_o_b"] = (d,)
        shapes[p + "attn_ln_g"] = (d,)
        shapes[p + "attn_ln_b"] = (d,)
        shapes[p + "ff_w1"] = (d, ff)
        shapes[p + "ff_b1"] = (ff,)
        shapes[p + "ff_w2"] = (ff, d)
        shapes[p + "ff_b2"] = (d,)
        shapes[p + "ff_ln_g"] = (d,)
        shapes[p + "ff_ln_b"] = (d,)
    shapes["pooler_w"] = (d, d)
    shapes["pooler_b"] = (d,)
    shapes["mlm_w"] = (d, d)
    shapes["mlm_b"] = (d,)
    shapes["mlm_ln_g"] = (d,)
    shapes["mlm_ln_b"] = (d,)
    shapes["mlm_out_b"] = (v,)
    return shapes


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Normal(0, std) with samples beyond two deviations redrawn."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


def init_params(config: EncoderConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """Deterministic initialization: truncated normal weights, zero biases,
    unit layer-norm gains."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    params: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(config).items():
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_g") or base == "ln_g":
            params[name] = np.ones(shape, dtype=dtype)
        elif base.endswith("_b") or base.endswith("_b1") or base.endswith("_b2"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = _truncated_normal(rng, shape, INIT_STD).astype(dtype)
    return params


def parameter_count(config: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for s in expected_shapes(config).values())


# ---------------------------------------------------------------------------
# primitive ops


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def layer_norm_backward(dy: np.ndarray, ln_cache, g: np.ndarray):
    xhat, inv = ln_cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxh = dy * g
    dx = inv * (
        dxh
        - dxh.mean(-1, keepdims=True)
        - xhat * (dxh * xhat).mean(-1, keepdims=True)
    )
    return dx, dg, db


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _SQRT1_2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _dropout_key(seed: int, step: int, site: str) -> int:
    digest = hashlib.blake2b(f"{seed}/{step}/{site}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def _dropout_mask(shape, rate: float, seed: int, step: int, site: str, dtype) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=_dropout_key(seed, step, site)))
    keep = rng.random(size=shape) >= rate
    return keep.astype(dtype) * (1.0 / (1.0 - rate))


# ---------------------------------------------------------------------------
# forward / backward


def _as_batch(ids, mask, config: EncoderConfig):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError(f"ids must be 2-d (batch, length), got shape {ids.shape}")
    if ids.shape[1] > config.max_len:
        raise ValueError(
            f"sequence length {ids.shape[1]} exceeds max_len {config.max_len}"
        )
    if mask is None:
        mask = np.ones(ids.shape, dtype=bool)
    else:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != ids.shape:
            raise ValueError("mask shape must match ids shape")
    return ids, mask


def forward(
    params: dict[str, np.ndarray],
    config: EncoderConfig,
    ids,
    mask=None,
    *,
    train: bool = False,
    rng_tag: tuple[int, int, str] | None = None,
    want_cache: bool = False,
):
    """Run the encoder.

    Returns ``(hidden, pooled)`` of shapes (B, L, d) and (B, d); with
    ``want_cache`` a cache for :func:`backward` is appended.  Padded key
    positions receive -inf attention logits, so outputs at real
    positions do not depend on pad content.  Dropout is applied only
    when ``train`` is set; it then requires ``rng_tag=(seed, step,
    name)`` for reproducible masks.
    """
    ids, mask = _as_batch(ids, mask, config)
    b, length = ids.shape
    dtype = params["tok_emb"].dtype
    use_dropout = train and config.dropout > 0.0
    if use_dropout and rng_tag is None:
        raise ValueError("train-mode dropout requires rng_tag=(seed, step, name)")
    rate = config.dropout

    def drop(x: np.ndarray, site: str, store: dict):
        if not use_dropout:
            return x
        seed, step, name = rng_tag
        m = _dropout_mask(x.shape, rate, seed, step, f"{name}/{site}", dtype)
        store[site] = m
        return x * m

    cache: dict = {"ids": ids, "mask": mask, "dropout": {}, "layers": []}
    x = params["tok_emb"][ids] + params["pos_emb"][:length][None, :, :]
    x, emb_ln = layer_norm(x, params["emb_ln_g"], params["emb_ln_b"])
    cache["emb_ln"] = emb_ln
    x = drop(x, "emb", cache["dropout"])

    n_heads, d_head = config.n_heads, config.d_head
    scale = 1.0 / float(np.sqrt(d_head))
    key_mask = mask[:, None, None, :]  # broadcast over heads and query axis

    for i in range(config.n_layers):
        p = f"layer{i}."
        lc: dict = {"x_in": x, "dropout": {}}
        q = x @ params[p + "attn_q_w"] + params[p + "attn_q_b"]
        k = x @ params[p + "attn_k_w"] + params[p + "attn_k_b"]
        v = x @ params[p + "attn_v_w"] + params[p + "attn_v_b"]
        q = q.reshape(b, length, n_heads, d_head).transpose(0, 2, 1, 3)
        k = k.reshape(b, length, n_heads, d_head).transpose(0, 2, 1, 3)
        v = v.reshape(b, length, n_heads, d_head).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(key_mask, scores, -np.inf)
        scores -= scores.max(-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(-1, keepdims=True)
        lc.update(q=q, k=k, v=v, attn_probs=probs)
        probs_d = drop(probs, "attn_probs", lc["dropout"])
        lc["attn_probs_dropped"] = probs_d
        ctx = (probs_d @ v).transpose(0, 2, 1, 3).reshape(b, length, config.d_model)
        lc["ctx"] = ctx
        ao = ctx @ params[p + "attn_o_w"] + params[p + "attn_o_b"]
        ao = drop(ao, "attn_out", lc["dropout"])
        x, attn_ln = layer_norm(
            x + ao, params[p + "attn_ln_g"], params[p + "attn_ln_b"]
        )
        lc["attn_ln"] = attn_ln
        lc["x_mid"] = x
        t = x @ params[p + "ff_w1"] + params[p + "ff_b1"]
        a = gelu(t)
        lc["ff_pre"] = t
        lc["ff_act"] = a
        f = a @ params[p + "ff_w2"] + params[p + "ff_b2"]
        f = drop(f, "ff_out", lc["dropout"])
        x, ff_ln = layer_norm(x + f, params[p + "ff_ln_g"], params[p + "ff_ln_b"])
        lc["ff_ln"] = ff_ln
        cache["layers"].append(lc)

    hidden = x
    h0 = hidden[:, 0, :]
    pooled = np.tanh(h0 @ params["pooler_w"] + params["pooler_b"])
    cache["hidden"] = hidden
    cache["h0"] = h0
    cache["pooled"] = pooled
    if want_cache:
        return hidden, pooled, cache
    return hidden, pooled


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.items()}


def _linear_param_grads(x: np.ndarray, dy: np.ndarray):
    """(dW, db) for y = x @ W + b with arbitrary leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return x2.T @ dy2, dy2.sum(0)


def backward(
    cache: dict,
    params: dict[str, np.ndarray],
    config: EncoderConfig,
    d_hidden: np.ndarray | None = None,
    d_pooled: np.ndarray | None = None,
    grads: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Backpropagate cotangents through a cached forward pass.

    ``d_hidden`` (B, L, d) and/or ``d_pooled`` (B, d) seed the pass.
    Gradients are accumulated into ``grads`` (created when omitted), so
    several forward passes can contribute to one update.
    """
    if grads is None:
        grads = zero_grads(params)
    ids = cache["ids"]
    b, length = ids.shape
    hidden = cache["hidden"]
    dx = np.zeros_like(hidden) if d_hidden is None else d_hidden.copy()

    if d_pooled is not None:
        pooled = cache["pooled"]
        dz = d_pooled * (1.0 - pooled * pooled)
        dw, db = _linear_param_grads(cache["h0"], dz)
        grads["pooler_w"] += dw
        grads["pooler_b"] += db
        dx[:, 0, :] += dz @ params["pooler_w"].T

    n_heads, d_head = config.n_heads, config.d_head
    scale = 1.0 / float(np.sqrt(d_head))

    for i in reversed(range(config.n_layers)):
        p = f"layer{i}."
        lc = cache["layers"][i]
        # second sublayer: x_out = LN(x_mid + dropout(FF(x_mid)))
        dy, dg, db = layer_norm_backward(dx, lc["ff_ln"], params[p + "ff_ln_g"])
        grads[p + "ff_ln_g"] += dg
        grads[p + "ff_ln_b"] += db
        dx_mid = dy
        df = dy
        if "ff_out" in lc["dropout"]:
            df = df * lc["dropout"]["ff_out"]
        dw, db2 = _linear_param_grads(lc["ff_act"], df)
        grads[p + "ff_w2"] += dw
        grads[p + "ff_b2"] += db2
        da = df @ params[p + "ff_w2"].T
        dt = da * gelu_grad(lc["ff_pre"])
        dw, db1 = _linear_param_grads(lc["x_mid"], dt)
        grads[p + "ff_w1"] += dw
        grads[p + "ff_b1"] += db1
        dx_mid = dx_mid + dt @ params[p + "ff_w1"].T
        # first sublayer: x_mid = LN(x_in + dropout(attn(x_in)))
        dy, dg, db = layer_norm_backward(dx_mid, lc["attn_ln"], params[p + "attn_ln_g"])
        grads[p + "attn_ln_g"] += dg
        grads[p + "attn_ln_b"] += db
        dx_in = dy
        dao = dy
        if "attn_out" in lc["dropout"]:
            dao = dao * lc["dropout"]["attn_out"]
        dw, dbo = _linear_param_grads(lc["ctx"], dao)
        grads[p + "attn_o_w"] += dw
        grads[p + "attn_o_b"] += dbo
        dctx = (dao @ params[p + "attn_o_w"].T).reshape(
            b, length, n_heads, d_head
        ).transpose(0, 2, 1, 3)
        probs_d = lc["attn_probs_dropped"]
        dv = probs_d.transpose(0, 1, 3, 2) @ dctx
        dprobs = dctx @ lc["v"].transpose(0, 1, 3, 2)
        if "attn_probs" in lc["dropout"]:
            dprobs = dprobs * lc["dropout"]["attn_probs"]
        probs = lc["attn_probs"]
        dscores = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True))
        dq = (dscores @ lc["k"]) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ lc["q"]) * scale
        x_in = lc["x_in"]
        for dproj, wname in ((dq, "attn_q"), (dk, "attn_k"), (dv, "attn_v")):
            dflat = dproj.transpose(0, 2, 1, 3).reshape(b, length, config.d_model)
            dw, dbp = _linear_param_grads(x_in, dflat)
            grads[p + wname + "_w"] += dw
            grads[p + wname + "_b"] += dbp
            dx_in = dx_in + dflat @ params[p + wname + "_w"].T
        dx = dx_in

    if "emb" in cache["dropout"]:
        dx = dx * cache["dropout"]["emb"]
    dy, dg, db = layer_norm_backward(dx, cache["emb_ln"], params["emb_ln_g"])
    grads["emb_ln_g"] += dg
    grads["emb_ln_b"] += db
    np.add.at(grads["tok_emb"], ids.reshape(-1), dy.reshape(-1, config.d_model))
    grads["pos_emb"][:length] += dy.sum(0)
    return grads


# ---------------------------------------------------------------------------
# pooling


POOLING_STRATEGIES = ("cls", "mean", "max")


def pool(
    hidden: np.ndarray,
    mask,
    strategy: str,
    params: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Reduce (B, L, d) hidden states to (B, d) sequence vectors.

    ``cls`` uses the tanh pooler over position 0; ``mean`` and ``max``
    reduce over mask=1 positions only, so trailing padding never changes
    the result.
    """
    out, _ = _pool_with_cache(hidden, mask, strategy, params)
    return out


def _pool_with_cache(hidden, mask, strategy, params):
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2 or mask.shape != hidden.shape[:2]:
        raise ValueError("mask shape must be (batch, length)")
    if not mask.any(axis=1).all():
        raise ValueError("pooling over an all-zero mask")
    if strategy == "cls":
        if params is None:
            raise ValueError("cls pooling requires encoder parameters")
        h0 = hidden[:, 0, :]
        pooled = np.tanh(h0 @ params["pooler_w"] + params["pooler_b"])
        return pooled, {"h0": h0, "pooled": pooled}
    if strategy == "mean":
        m = mask.astype(hidden.dtype)
        denom = m.sum(1, keepdims=True)
        pooled = (hidden * m[:, :, None]).sum(1) / denom
        return pooled, {"m": m, "denom": denom}
    if strategy == "max":
        neg = np.where(mask[:, :, None], hidden, -np.inf)
        idx = neg.argmax(axis=1)  # (B, d)
        pooled = np.take_along_axis(hidden, idx[:, None, :], axis=1)[:, 0, :]
        return pooled, {"idx": idx}
    raise ValueError(f"unknown pooling strategy {strategy!r}; expected one of {POOLING_STRATEGIES}")


def pool_backward(
    d_pooled: np.ndarray,
    pool_cache: dict,
    hidden_shape: tuple[int, ...],
    strategy: str,
    params: dict[str, np.ndarray] | None = None,
    grads: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Cotangent of the hidden states for a cached :func:`pool` call.

    For ``cls`` the pooler parameter gradients are accumulated into
    ``grads``.
    """
    d_hidden = np.zeros(hidden_shape, dtype=d_pooled.dtype)
    if strategy == "cls":
        pooled = pool_cache["pooled"]
        dz = d_pooled * (1.0 - pooled * pooled)
        if grads is not None:
            dw, db = _linear_param_grads(pool_cache["h0"], dz)
            grads["pooler_w"] += dw
            grads["pooler_b"] += db
        d_hidden[:, 0, :] = dz @ params["pooler_w"].T
    elif strategy == "mean":
        m, denom = pool_cache["m"], pool_cache["denom"]
        d_hidden += (d_pooled / denom)[:, None, :] * m[:, :, None]
    elif strategy == "max":
        idx = pool_cache["idx"]
        np.put_along_axis(d_hidden, idx[:, None, :], d_pooled[:, None, :], axis=1)
    else:
        raise ValueError(f"unknown pooling strategy {strategy!r}")
    return d_hidden


# ---------------------------------------------------------------------------
# MLM head


def mlm_head_rows(params: dict[str, np.ndarray], rows: np.ndarray):
    """Log-probabilities over the vocabulary for a stack of hidden rows.

    head(h) = layer_norm(GELU(h @ W + b)), projected onto the tied token
    embeddings plus an output bias, then log-softmax.
    Returns ``(log_probs (M, V), cache)``.
    """
    t = rows @ params["mlm_w"] + params["mlm_b"]
    a = gelu(t)
    h, ln = layer_norm(a, params["mlm_ln_g"], params["mlm_ln_b"])
    logits = h @ params["tok_emb"].T + params["mlm_out_b"]
    shifted = logits - logits.max(-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(-1, keepdims=True))
    log_probs = shifted - lse
    cache = {"rows": rows, "t": t, "h": h, "ln": ln, "log_probs": log_probs}
    return log_probs, cache


def mlm_head_rows_backward(
    cache: dict,
    params: dict[str, np.ndarray],
    d_logits: np.ndarray,
    grads: dict[str, np.ndarray],
) -> np.ndarray:
    """Backward through the head given the cotangent of the raw logits.

    The tied projection contributes to the token-embedding gradient here
    and again through the input lookup in :func:`backward`.  Returns the
    cotangent of the input rows.
    """
    h = cache["h"]
    grads["mlm_out_b"] += d_logits.sum(0)
    grads["tok_emb"] += d_logits.T @ h
    dh = d_logits @ params["tok_emb"]
    da, dg, db = layer_norm_backward(dh, cache["ln"], params["mlm_ln_g"])
    grads["mlm_ln_g"] += dg
    grads["mlm_ln_b"] += db
    dt = da * gelu_grad(cache["t"])
    dw, dbt = _linear_param_grads(cache["rows"], dt)
    grads["mlm_w"] += dw
    grads["mlm_b"] += dbt
    return dt @ params["mlm_w"].T


def mlm_log_probs(hidden: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """(B, L, V) log-probabilities from the MLM head at every position."""
    b, length, d = hidden.shape
    log_probs, _ = mlm_head_rows(params, hidden.reshape(-1, d))
    return log_probs.reshape(b, length, -1)


# ---------------------------------------------------------------------------
# model bundle and batching helpers


@dataclass
class Model:
    """Parameters plus configuration, the unit that is saved and loaded."""

    params: dict[str, np.ndarray]
    config: EncoderConfig

    @classmethod
    def init(cls, config: EncoderConfig, dtype=np.float32) -> "Model":
        return cls(params=init_params(config, dtype=dtype), config=config)

    def forward(self, ids, mask=None, **kw):
        return forward(self.params, self.config, ids, mask, **kw)

    def pool(self, hidden, mask, strategy):
        return pool(hidden, mask, strategy, self.params)

    def mlm_log_probs(self, hidden):
        return mlm_log_probs(hidden, self.params)

    def astype(self, dtype) -> "Model":
        return Model(
            params={k: v.astype(dtype) for k, v in self.params.items()},
            config=self.config,
        )


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = 0):
    """Right-pad id lists to a rectangle; returns (ids, mask) arrays."""
    if not sequences:
        raise ValueError("empty batch")
    length = max(len(s) for s in sequences)
    ids = np.full((len(sequences), length), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# checkpoint I/O

CHECKPOINT_MAGIC = b"ULRM"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    params: dict[str, np.ndarray], config: EncoderConfig, path: str | Path
) -> None:
    """Write a versioned binary checkpoint (tensors as little-endian f32)."""
    names = sorted(params)
    payload = bytearray()
    directory = bytearray()
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        offset = len(payload)
        payload.extend(arr.tobytes())
        nb = name.encode("utf-8")
        directory.extend(struct.pack("<I", len(nb)))
        directory.extend(nb)
        directory.extend(struct.pack("<I", arr.ndim))
        directory.extend(struct.pack(f"<{arr.ndim}I", *arr.shape))
        directory.extend(struct.pack("<Q", offset))
    config_blob = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<I", len(names)))
        fh.write(directory)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint file while reading {what}")
    return data


def load_checkpoint(path: str | Path) -> Model:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises :class:`CheckpointError` for foreign files, version or shape
    mismatches, and truncation; no partial state is ever returned.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError("not a ULRM checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            cfg_dict = json.loads(_read_exact(fh, cfg_len, "config").decode("utf-8"))
            config = EncoderConfig(**cfg_dict)
        except (ValueError, TypeError) as exc:
            raise CheckpointError(f"bad checkpoint config block: {exc}") from exc
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        entries = []
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor dims"))
            (offset,) = struct.unpack("<Q", _read_exact(fh, 8, "tensor offset"))
            entries.append((name, dims, offset))
        (payload_len,) = struct.unpack("<Q", _read_exact(fh, 8, "payload length"))
        payload = _read_exact(fh, payload_len, "tensor payload")
    shapes = expected_shapes(config)
    if {e[0] for e in entries} != set(shapes):
        raise CheckpointError("checkpoint tensor directory does not match config")
    params: dict[str, np.ndarray] = {}
    for name, dims, offset in entries:
        if shapes[name] != tuple(dims):
            raise CheckpointError(
                f"shape mismatch for tensor {name}: file has {tuple(dims)}, "
                f"config implies {shapes[name]}"
            )
        size = int(np.prod(dims)) * 4
        if offset + size > len(payload):
            raise CheckpointError(f"truncated checkpoint file while reading {name}")
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(dims)), offset=offset)
        params[name] = arr.reshape(dims).copy()
    return Model(params=params, config=config)
