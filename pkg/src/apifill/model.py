"""Encoder-decoder transformer on raw numpy arrays with a hand-written backward pass.

Layout is pre-norm: layer norm feeds each sub-block and the residual adds the
sub-block input to its output; a final layer norm closes each stack. The
encoder embedding output is an explicit injection point so embedding-space
perturbations can be slotted in without touching the id pipeline. An injected
array is treated as (embeddings + constant offset), so parameter gradients in
a perturbed pass still flow into the embedding tables.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .bpe import BOS_ID, TokenSeq

LN_EPS = 1e-6
_INIT_STD = 0.02
_CHECKPOINT_MAGIC = b"AFCK"
_CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    encoder_layers: int = 2
    decoder_layers: int = 2
    hidden_size: int = 128
    heads: int = 4
    ffn_size: int = 256
    max_input_length: int = 48
    max_output_length: int = 16
    seed: int = 0
    dtype: str = "float32"  # float64 for gradient-check builds

    def __post_init__(self):
        if self.hidden_size % self.heads != 0:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")
        if min(self.max_input_length, self.max_output_length) < 1:
            raise ValueError("sequence lengths must be >= 1")
        if min(self.encoder_layers, self.decoder_layers, self.vocab_size) < 1:
            raise ValueError("layer counts and vocab_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# Params is an ordered name -> array mapping; checkpoint layout follows
# insertion order from init_params.
Params = dict


def init_params(config: ModelConfig) -> Params:
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    d, f, v = config.hidden_size, config.ffn_size, config.vocab_size

    p: Params = {}

    def mat(name, shape):
        p[name] = rng.normal(0.0, _INIT_STD, size=shape).astype(dt)

    def zeros(name, shape):
        p[name] = np.zeros(shape, dtype=dt)

    def ones(name, shape):
        p[name] = np.ones(shape, dtype=dt)

    mat("embed.tok", (v, d))
    mat("embed.pos_enc", (config.max_input_length, d))
    mat("embed.pos_dec", (config.max_output_length, d))

    def attn_block(prefix):
        ones(f"{prefix}.ln.scale", d)
        zeros(f"{prefix}.ln.offset", d)
        for w in ("wq", "wk", "wv", "wo"):
            mat(f"{prefix}.{w}", (d, d))

    def ffn_block(prefix):
        ones(f"{prefix}.ln.scale", d)
        zeros(f"{prefix}.ln.offset", d)
        mat(f"{prefix}.w1", (d, f))
        zeros(f"{prefix}.b1", f)
        mat(f"{prefix}.w2", (f, d))
        zeros(f"{prefix}.b2", d)

    for i in range(config.encoder_layers):
        attn_block(f"enc.{i}.attn")
        ffn_block(f"enc.{i}.ffn")
    ones("enc.final.scale", d)
    zeros("enc.final.offset", d)

    for i in range(config.decoder_layers):
        attn_block(f"dec.{i}.self")
        attn_block(f"dec.{i}.cross")
        ffn_block(f"dec.{i}.ffn")
    ones("dec.final.scale", d)
    zeros("dec.final.offset", d)

    mat("out.w", (d, v))
    zeros("out.b", v)
    return p


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


# -- primitive blocks -------------------------------------------------------

def layer_norm(x, scale, offset):
    # same arithmetic order as _ln_fwd so cached and cache-free paths agree bitwise
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) * (1.0 / np.sqrt(var + LN_EPS)) * scale + offset


def _ln_fwd(x, scale, offset):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * scale + offset, (xhat, inv, scale)


def _ln_bwd(dy, cache):
    xhat, inv, scale = cache
    d = xhat.shape[-1]
    dscale = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    doffset = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * scale
    dx = inv * (dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dscale, doffset


def ffn(x, w1, b1, w2, b2):
    return np.maximum(0.0, x @ w1 + b1) @ w2 + b2


def _ffn_fwd(x, w1, b1, w2, b2):
    h = x @ w1 + b1
    a = np.maximum(0.0, h)
    return a @ w2 + b2, (x, h, a, w1, w2)


def _ffn_bwd(dy, cache):
    x, h, a, w1, w2 = cache
    flat = lambda t: t.reshape(-1, t.shape[-1])
    da = dy @ w2.T
    dw2 = flat(a).T @ flat(dy)
    db2 = flat(dy).sum(axis=0)
    dh = da * (h > 0)
    dw1 = flat(x).T @ flat(dh)
    db1 = flat(dh).sum(axis=0)
    dx = dh @ w1.T
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def attention(q, k, v, mask=None):
    """softmax(q kT / sqrt(d_k)) v over the last two axes.

    `mask` marks invalid key positions (True = excluded); excluded keys get
    exactly zero weight. Returns (output, weights).
    """
    d_k = q.shape[-1]
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(d_k)
    if mask is not None:
        scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True)
    return w @ v, w


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)  # (B,h,T,hd)


def _merge_heads(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def _mha_fwd(xq, xkv, p, prefix, heads, mask=None):
    wq, wk, wv, wo = (p[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    q = _split_heads(xq @ wq, heads)
    k = _split_heads(xkv @ wk, heads)
    v = _split_heads(xkv @ wv, heads)
    ctx, w = attention(q, k, v, mask)
    merged = _merge_heads(ctx)
    out = merged @ wo
    return out, (xq, xkv, q, k, v, w, merged, prefix, heads)


def _mha_bwd(dy, cache, p):
    xq, xkv, q, k, v, w, merged, prefix, heads = cache
    wq, wk, wv, wo = (p[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    flat = lambda t: t.reshape(-1, t.shape[-1])

    dwo = flat(merged).T @ flat(dy)
    dctx = _split_heads(dy @ wo.T, heads)

    dw = dctx @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(w, -1, -2) @ dctx
    ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
    scale = 1.0 / np.sqrt(q.shape[-1])
    dq = ds @ k * scale
    dk = np.swapaxes(ds, -1, -2) @ q * scale

    dq_m, dk_m, dv_m = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    dxq = dq_m @ wq.T
    dxkv = dk_m @ wk.T + dv_m @ wv.T
    grads = {
        "wq": flat(xq).T @ flat(dq_m),
        "wk": flat(xkv).T @ flat(dk_m),
        "wv": flat(xkv).T @ flat(dv_m),
        "wo": dwo,
    }
    return dxq, dxkv, grads


def cross_entropy(logits, target_ids, target_len):
    """Per-example summed NLL over non-pad target positions, plus softmax cache."""
    b, m, _ = logits.shape
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    mask = np.arange(m)[None, :] < np.asarray(target_len)[:, None]
    rows = np.arange(b)[:, None], np.arange(m)[None, :]
    nll = -logp[rows[0], rows[1], target_ids] * mask
    per_example = nll.sum(axis=1)
    probs = np.exp(logp)
    return per_example, probs, mask


# -- full model -------------------------------------------------------------

def _invalid_from_len(lengths, t):
    return (np.arange(t)[None, :] >= np.asarray(lengths)[:, None])[:, None, None, :]  # (B,1,1,T)


def _causal_invalid(t):
    tri = np.triu(np.ones((t, t), dtype=bool), k=1)
    return tri[None, None, :, :]


@dataclass
class ForwardTrace:
    loss: float
    per_example_loss: np.ndarray
    logits: np.ndarray            # (B, M, V)
    encoder_states: np.ndarray    # (B, N, d) after the final encoder norm
    embeddings: np.ndarray        # (B, N, d) encoder embedding output actually used
    config: ModelConfig
    _params: Params
    _cache: dict | None
    _consumed: bool = False


def _as_batch(seqs):
    if isinstance(seqs, TokenSeq):
        seqs = [seqs]
    ids = np.stack([s.ids for s in seqs]).astype(np.int64)
    lengths = np.array([s.true_length for s in seqs], dtype=np.int64)
    return ids, lengths


def forward(params, config, inputs, targets, override_embeddings=None):
    """Teacher-forced forward pass; accepts TokenSeq or lists of TokenSeq."""
    input_ids, input_len = _as_batch(inputs)
    target_ids, target_len = _as_batch(targets)
    return forward_ids(params, config, input_ids, input_len, target_ids, target_len,
                       override_embeddings=override_embeddings)


def _encode(p, config, x, enc_invalid, cache):
    heads = config.heads
    h = x
    for i in range(config.encoder_layers):
        hn, c_ln1 = _ln_fwd(h, p[f"enc.{i}.attn.ln.scale"], p[f"enc.{i}.attn.ln.offset"])
        a, c_attn = _mha_fwd(hn, hn, p, f"enc.{i}.attn", heads, mask=enc_invalid)
        h = h + a
        hn2, c_ln2 = _ln_fwd(h, p[f"enc.{i}.ffn.ln.scale"], p[f"enc.{i}.ffn.ln.offset"])
        fo, c_ffn = _ffn_fwd(hn2, p[f"enc.{i}.ffn.w1"], p[f"enc.{i}.ffn.b1"],
                             p[f"enc.{i}.ffn.w2"], p[f"enc.{i}.ffn.b2"])
        h = h + fo
        if cache is not None:
            cache["enc_layers"].append((c_ln1, c_attn, c_ln2, c_ffn))
    enc_out, c_enc_final = _ln_fwd(h, p["enc.final.scale"], p["enc.final.offset"])
    return enc_out, c_enc_final


def forward_ids(params, config, input_ids, input_len, target_ids, target_len,
                override_embeddings=None, want_cache=True):
    p = params
    heads = config.heads
    b, n = input_ids.shape
    m = target_ids.shape[1]

    x_embed = p["embed.tok"][input_ids] + p["embed.pos_enc"][:n]
    if override_embeddings is not None:
        if override_embeddings.shape != x_embed.shape:
            raise ValueError(f"override shape {override_embeddings.shape} != embedding shape {x_embed.shape}")
        x = override_embeddings
    else:
        x = x_embed

    enc_invalid = _invalid_from_len(input_len, n)
    cache = {"enc_layers": [], "dec_layers": []} if want_cache else None
    enc_out, c_enc_final = _encode(p, config, x, enc_invalid, cache)

    dec_in = np.empty_like(target_ids)
    dec_in[:, 0] = BOS_ID
    dec_in[:, 1:] = target_ids[:, :-1]

    y = p["embed.tok"][dec_in] + p["embed.pos_dec"][:m]
    causal = _causal_invalid(m)
    cross_invalid = enc_invalid

    g = y
    for i in range(config.decoder_layers):
        gn, c_ln1 = _ln_fwd(g, p[f"dec.{i}.self.ln.scale"], p[f"dec.{i}.self.ln.offset"])
        a, c_self = _mha_fwd(gn, gn, p, f"dec.{i}.self", heads, mask=causal)
        g = g + a
        gn2, c_ln2 = _ln_fwd(g, p[f"dec.{i}.cross.ln.scale"], p[f"dec.{i}.cross.ln.offset"])
        ca, c_cross = _mha_fwd(gn2, enc_out, p, f"dec.{i}.cross", heads, mask=cross_invalid)
        g = g + ca
        gn3, c_ln3 = _ln_fwd(g, p[f"dec.{i}.ffn.ln.scale"], p[f"dec.{i}.ffn.ln.offset"])
        fo, c_ffn = _ffn_fwd(gn3, p[f"dec.{i}.ffn.w1"], p[f"dec.{i}.ffn.b1"],
                             p[f"dec.{i}.ffn.w2"], p[f"dec.{i}.ffn.b2"])
        g = g + fo
        if want_cache:
            cache["dec_layers"].append((c_ln1, c_self, c_ln2, c_cross, c_ln3, c_ffn))
    dec_out, c_dec_final = _ln_fwd(g, p["dec.final.scale"], p["dec.final.offset"])

    logits = dec_out @ p["out.w"] + p["out.b"]
    per_example, probs, loss_mask = cross_entropy(logits, target_ids, target_len)
    loss = float(per_example.mean())
    if not np.isfinite(loss):
        raise NonFiniteLossError("non-finite loss in forward pass")

    if want_cache:
        cache.update(
            enc_final=c_enc_final, dec_final=c_dec_final,
            dec_out=dec_out, probs=probs, loss_mask=loss_mask,
            input_ids=input_ids, input_len=input_len,
            target_ids=target_ids, dec_in=dec_in,
            enc_out=enc_out, overridden=override_embeddings is not None,
        )
    return ForwardTrace(
        loss=loss, per_example_loss=per_example, logits=logits,
        encoder_states=enc_out, embeddings=x, config=config,
        _params=params, _cache=cache,
    )


def backward(trace: ForwardTrace):
    """Gradients of the mean batch loss: (per-parameter dict, d loss / d encoder embeddings)."""
    if trace._consumed:
        raise RuntimeError("backward called twice on the same trace")
    if trace._cache is None:
        raise RuntimeError("trace was built without a backward cache")
    trace._consumed = True

    p = trace._params
    cfg = trace.config
    c = trace._cache
    grads = zeros_like_params(p)
    b, m, _ = trace.logits.shape
    n = c["input_ids"].shape[1]
    flat = lambda t: t.reshape(-1, t.shape[-1])

    rows = np.arange(b)[:, None], np.arange(m)[None, :]
    dlogits = c["probs"].copy()
    dlogits[rows[0], rows[1], c["target_ids"]] -= 1.0
    dlogits *= c["loss_mask"][:, :, None]
    dlogits /= b  # batch-mean loss

    grads["out.w"] += flat(c["dec_out"]).T @ flat(dlogits)
    grads["out.b"] += flat(dlogits).sum(axis=0)
    dg = dlogits @ p["out.w"].T

    dg, dsc, doff = _ln_bwd(dg, c["dec_final"])
    grads["dec.final.scale"] += dsc
    grads["dec.final.offset"] += doff

    d_enc_out = np.zeros_like(c["enc_out"])
    for i in reversed(range(cfg.decoder_layers)):
        c_ln1, c_self, c_ln2, c_cross, c_ln3, c_ffn = c["dec_layers"][i]

        dgn3, ffn_g = _ffn_bwd(dg, c_ffn)
        for k, v in ffn_g.items():
            grads[f"dec.{i}.ffn.{k}"] += v
        dx, dsc, doff = _ln_bwd(dgn3, c_ln3)
        grads[f"dec.{i}.ffn.ln.scale"] += dsc
        grads[f"dec.{i}.ffn.ln.offset"] += doff
        dg = dg + dx

        dxq, dxkv, attn_g = _mha_bwd(dg, c_cross, p)
        for k, v in attn_g.items():
            grads[f"dec.{i}.cross.{k}"] += v
        d_enc_out += dxkv
        dx, dsc, doff = _ln_bwd(dxq, c_ln2)
        grads[f"dec.{i}.cross.ln.scale"] += dsc
        grads[f"dec.{i}.cross.ln.offset"] += doff
        dg = dg + dx

        dxq, dxkv, attn_g = _mha_bwd(dg, c_self, p)
        for k, v in attn_g.items():
            grads[f"dec.{i}.self.{k}"] += v
        dx, dsc, doff = _ln_bwd(dxq + dxkv, c_ln1)
        grads[f"dec.{i}.self.ln.scale"] += dsc
        grads[f"dec.{i}.self.ln.offset"] += doff
        dg = dg + dx

    np.add.at(grads["embed.tok"], c["dec_in"], dg)
    grads["embed.pos_dec"][:m] += dg.sum(axis=0)

    dh, dsc, doff = _ln_bwd(d_enc_out, c["enc_final"])
    grads["enc.final.scale"] += dsc
    grads["enc.final.offset"] += doff

    for i in reversed(range(cfg.encoder_layers)):
        c_ln1, c_attn, c_ln2, c_ffn = c["enc_layers"][i]

        dxn2, ffn_g = _ffn_bwd(dh, c_ffn)
        for k, v in ffn_g.items():
            grads[f"enc.{i}.ffn.{k}"] += v
        dx, dsc, doff = _ln_bwd(dxn2, c_ln2)
        grads[f"enc.{i}.ffn.ln.scale"] += dsc
        grads[f"enc.{i}.ffn.ln.offset"] += doff
        dh = dh + dx

        dxq, dxkv, attn_g = _mha_bwd(dh, c_attn, p)
        for k, v in attn_g.items():
            grads[f"enc.{i}.attn.{k}"] += v
        dx, dsc, doff = _ln_bwd(dxq + dxkv, c_ln1)
        grads[f"enc.{i}.attn.ln.scale"] += dsc
        grads[f"enc.{i}.attn.ln.offset"] += doff
        dh = dh + dx

    # pad rows never feed the loss, so their input gradient is exactly zero
    valid = (np.arange(n)[None, :] < c["input_len"][:, None])[:, :, None]
    embedding_grad = np.where(valid, dh, 0.0)

    # the embedding output (or its perturbed stand-in) is tok + pos, so the
    # tables always collect the encoder-side gradient
    np.add.at(grads["embed.tok"], c["input_ids"], embedding_grad)
    grads["embed.pos_enc"][:n] += embedding_grad.sum(axis=0)

    return grads, embedding_grad


# -- encoding/decoding helpers for inference --------------------------------

def encode_inputs(params, config, input_ids, input_len):
    """Encoder-only pass; returns (encoder states, invalid-key mask)."""
    input_len = np.asarray(input_len)
    n = input_ids.shape[1]
    x = params["embed.tok"][input_ids] + params["embed.pos_enc"][:n]
    enc_invalid = _invalid_from_len(input_len, n)
    enc_out, _ = _encode(params, config, x, enc_invalid, cache=None)
    return enc_out, enc_invalid


def decoder_logits(params, config, enc_out, enc_invalid, dec_in_ids):
    """Logits for every decoder position given already-encoded inputs."""
    p = params
    heads = config.heads
    bh, m = dec_in_ids.shape
    if enc_out.shape[0] == 1 and bh > 1:
        enc_out = np.broadcast_to(enc_out, (bh,) + enc_out.shape[1:])
        enc_invalid = np.broadcast_to(enc_invalid, (bh,) + enc_invalid.shape[1:])

    g = p["embed.tok"][dec_in_ids] + p["embed.pos_dec"][:m]
    causal = _causal_invalid(m)
    for i in range(config.decoder_layers):
        gn = layer_norm(g, p[f"dec.{i}.self.ln.scale"], p[f"dec.{i}.self.ln.offset"])
        a, _ = _mha_fwd(gn, gn, p, f"dec.{i}.self", heads, mask=causal)
        g = g + a
        gn = layer_norm(g, p[f"dec.{i}.cross.ln.scale"], p[f"dec.{i}.cross.ln.offset"])
        ca, _ = _mha_fwd(gn, enc_out, p, f"dec.{i}.cross", heads, mask=enc_invalid)
        g = g + ca
        gn = layer_norm(g, p[f"dec.{i}.ffn.ln.scale"], p[f"dec.{i}.ffn.ln.offset"])
        g = g + ffn(gn, p[f"dec.{i}.ffn.w1"], p[f"dec.{i}.ffn.b1"],
                    p[f"dec.{i}.ffn.w2"], p[f"dec.{i}.ffn.b2"])
    g = layer_norm(g, p["dec.final.scale"], p["dec.final.offset"])
    return g @ p["out.w"] + p["out.b"]


# -- checkpointing ----------------------------------------------------------

def save_params(path, params: Params, config: ModelConfig):
    """Versioned header + little-endian tensor blobs in declaration order."""
    header = {
        "version": _CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "tensors": [[name, list(arr.shape), str(arr.dtype)] for name, arr in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)


def load_params(path, expected_config: ModelConfig | None = None):
    """Returns (params, config); fails loudly on truncation or config mismatch."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != _CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    config = ModelConfig.from_dict(header["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"checkpoint config mismatch: saved {config}, expected {expected_config}")

    params: Params = {}
    offset = 8 + hlen
    for name, shape, dtype in header["tensors"]:
        dt = np.dtype(dtype).newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"truncated checkpoint: tensor {name} incomplete")
        params[name] = np.frombuffer(chunk, dtype=dt).reshape(shape).astype(np.dtype(dtype))
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"trailing bytes in checkpoint: {len(data) - offset}")
    return params, config
