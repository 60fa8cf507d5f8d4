"""Decoder-only transformer in plain numpy: forward, loss, exact gradients.

Pre-norm residual blocks with RMS normalization, rotary position encoding on
query/key pairs, causal scaled-dot-product attention, and a gated (SiLU) MLP.
The embedding and output head are separate tensors. Computation runs in the
dtype of the parameter tensors (float32 by default); reductions that feed
norms and losses accumulate in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, TokenizerModel, decode, encode

INIT_STD = 0.02


def default_hidden_dim(dim: int) -> int:
    """Gated-MLP inner width: 8*dim/3 rounded up to a multiple of 16."""
    return 16 * ((8 * dim + 47) // 48)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int
    n_layers: int
    n_heads: int
    context_len: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    hidden_dim: int | None = None

    def __post_init__(self):
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", default_hidden_dim(self.dim))
        problems = []
        if self.vocab_size < 1:
            problems.append(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.dim < 1:
            problems.append(f"dim must be >= 1, got {self.dim}")
        if self.n_layers < 1:
            problems.append(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_heads < 1:
            problems.append(f"n_heads must be >= 1, got {self.n_heads}")
        elif self.dim % self.n_heads != 0:
            problems.append(f"dim not divisible by n_heads ({self.dim} % {self.n_heads})")
        elif (self.dim // self.n_heads) % 2 != 0:
            problems.append(
                f"head_dim {self.dim // self.n_heads} must be even for rotary pairing"
            )
        if self.context_len < 2:
            problems.append(f"context_len must be >= 2, got {self.context_len}")
        if self.rope_theta <= 0:
            problems.append(f"rope_theta must be positive, got {self.rope_theta}")
        if self.norm_eps <= 0:
            problems.append(f"norm_eps must be positive, got {self.norm_eps}")
        if self.hidden_dim < 1:
            problems.append(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical (name -> shape) map; order defines init and checkpoint layout."""
    v, d, h = config.vocab_size, config.dim, config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {"tok_embedding": (v, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w_gate"] = (d, h)
        shapes[p + "w_up"] = (d, h)
        shapes[p + "w_down"] = (h, d)
    shapes["final_norm"] = (d,)
    shapes["output_head"] = (d, v)
    return shapes


@dataclass
class ModelParams:
    """Model weights as an ordered name->array dict plus their config."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )

    def param_count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def validate_shapes(self) -> None:
        expect = expected_shapes(self.config)
        if list(self.tensors.keys()) != list(expect.keys()):
            raise ConfigError("parameter tensor names do not match the architecture")
        for name, shape in expect.items():
            if self.tensors[name].shape != shape:
                raise ConfigError(
                    f"tensor '{name}' has shape {self.tensors[name].shape}, "
                    f"expected {shape}"
                )


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Fresh parameters: Normal(0, 0.02^2) weights, norm weights exactly 1."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
    return ModelParams(config, tensors)


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    """weight * x / sqrt(mean(x^2) + eps), normalizing over the last axis."""
    x = np.asarray(x)
    y, _ = _rmsnorm_fwd(x, np.asarray(weight), eps)
    return y


def _rmsnorm_fwd(x, weight, eps):
    ms = np.mean(np.square(x), axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(ms + eps)).astype(x.dtype)
    return x * inv * weight, inv


def _rmsnorm_bwd(dy, x, weight, inv):
    d = x.shape[-1]
    dyw = dy * weight
    s = np.sum(dyw * x, axis=-1, keepdims=True)
    dx = inv * dyw - x * (inv**3) * (s / d)
    axes = tuple(range(x.ndim - 1))
    dw = np.sum(dy * x * inv, axis=axes)
    return dx, dw


def _rope_tables(n_positions: int, head_dim: int, theta: float, dtype):
    # angle(t, j) = t * theta^(-2j/head_dim) for pair index j
    j = np.arange(head_dim // 2, dtype=np.float64)
    inv_freq = theta ** (-2.0 * j / head_dim)
    angles = np.arange(n_positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(
    q: np.ndarray, k: np.ndarray, position: int, theta: float
) -> tuple[np.ndarray, np.ndarray]:
    """Rotate consecutive (2j, 2j+1) pairs of q and k by position-dependent angles."""
    q = np.asarray(q)
    k = np.asarray(k)
    if q.shape[-1] % 2 != 0:
        raise DataError(f"head_dim {q.shape[-1]} is odd; rotary pairing needs even")
    cos, sin = _rope_tables(position + 1, q.shape[-1], theta, np.float64)
    c, s = cos[position], sin[position]

    def rot(x):
        x64 = x.astype(np.float64)
        even, odd = x64[..., 0::2], x64[..., 1::2]
        out = np.empty_like(x64)
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out.astype(x.dtype)

    return rot(q), rot(k)


def _rope_rotate(x, cos, sin):
    # x: [B, H, T, hd]; cos/sin: [T, hd/2]
    even, odd = x[..., 0::2], x[..., 1::2]
    c = cos[None, None, :, :]
    s = sin[None, None, :, :]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def _rope_rotate_back(dx, cos, sin):
    even, odd = dx[..., 0::2], dx[..., 1::2]
    c = cos[None, None, :, :]
    s = sin[None, None, :, :]
    out = np.empty_like(dx)
    out[..., 0::2] = even * c + odd * s
    out[..., 1::2] = -even * s + odd * c
    return out


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError("tokens must be a non-empty 1-D sequence")
    if arr.size > config.context_len:
        raise DataError(
            f"sequence of {arr.size} tokens exceeds context_len {config.context_len}"
        )
    if arr.min() < 0 or arr.max() >= config.vocab_size:
        raise DataError(f"token id out of range [0, {config.vocab_size})")
    return arr


def _forward_batch(params: ModelParams, tokens: np.ndarray, need_cache: bool):
    """Forward over an int batch [B, T] -> logits [B, T, V] (+ cache)."""
    cfg = params.config
    t = params.tensors
    B, T = tokens.shape
    H, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    dtype = params.dtype

    cos, sin = _rope_tables(T, hd, cfg.rope_theta, dtype)
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)

    x = t["tok_embedding"][tokens]
    cache = {"tokens": tokens, "cos": cos, "sin": sin, "layers": []} if need_cache else None

    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        x_in = x
        h, inv_attn = _rmsnorm_fwd(x, t[p + "attn_norm"], cfg.norm_eps)

        def heads(m):
            return m.reshape(B, T, H, hd).transpose(0, 2, 1, 3)

        q = heads(h @ t[p + "wq"])
        k = heads(h @ t[p + "wk"])
        v = heads(h @ t[p + "wv"])
        q = _rope_rotate(q, cos, sin)
        k = _rope_rotate(k, cos, sin)

        scores = (q @ k.transpose(0, 1, 3, 2)) * dtype.type(scale)
        scores = np.where(causal[None, None], dtype.type(-np.inf), scores)
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
        probs = e / e.sum(axis=-1, keepdims=True)

        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.dim)
        x = x_in + ctx @ t[p + "wo"]

        x_mid = x
        h2, inv_mlp = _rmsnorm_fwd(x, t[p + "mlp_norm"], cfg.norm_eps)
        g = h2 @ t[p + "w_gate"]
        u = h2 @ t[p + "w_up"]
        act = _silu(g) * u
        x = x_mid + act @ t[p + "w_down"]

        if need_cache:
            cache["layers"].append(
                dict(
                    x_in=x_in, inv_attn=inv_attn, h=h, q=q, k=k, v=v, probs=probs,
                    ctx=ctx, x_mid=x_mid, inv_mlp=inv_mlp, h2=h2, g=g, u=u, act=act,
                )
            )

    x_fin_in = x
    h_fin, inv_fin = _rmsnorm_fwd(x, t["final_norm"], cfg.norm_eps)
    logits = h_fin @ t["output_head"]
    if need_cache:
        cache.update(x_fin_in=x_fin_in, inv_fin=inv_fin, h_fin=h_fin)
    return logits, cache


def _sigmoid(g):
    neg = np.exp(-np.abs(g))
    return np.where(g >= 0, 1.0 / (1.0 + neg), neg / (1.0 + neg)).astype(g.dtype)


def _silu(g):
    return g * _sigmoid(g)


def forward(params: ModelParams, tokens) -> np.ndarray:
    """Logits [seq_len, vocab_size] for one token sequence."""
    arr = _check_tokens(params.config, tokens)
    logits, _ = _forward_batch(params, arr[None, :], need_cache=False)
    return logits[0]


def forward_with_internals(params: ModelParams, tokens):
    """Forward returning (logits, per-layer attention probabilities [H, T, T])."""
    arr = _check_tokens(params.config, tokens)
    logits, cache = _forward_batch(params, arr[None, :], need_cache=True)
    return logits[0], [layer["probs"][0] for layer in cache["layers"]]


def cross_entropy_loss(logits: np.ndarray, targets) -> float:
    """Mean -log softmax(logits)[target] over positions whose target != PAD."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 2:
        logits, targets = logits[None], targets[None]
    if targets.shape != logits.shape[:2]:
        raise DataError(
            f"targets shape {targets.shape} does not match logits {logits.shape[:2]}"
        )
    nll, _, mask = _nll_terms(logits, targets)
    n = int(mask.sum())
    if n == 0:
        raise DataError("all positions masked")
    return float(nll.sum() / n)


def _nll_terms(logits, targets):
    """Per-position -log p(target), float64, masked positions zeroed."""
    mask = targets != PAD_ID
    m = logits.max(axis=-1, keepdims=True)
    shifted = (logits - m).astype(np.float64)
    lse = np.log(np.sum(np.exp(shifted), axis=-1))
    sel = np.take_along_axis(
        shifted, np.maximum(targets, 0)[..., None], axis=-1
    )[..., 0]
    nll = np.where(mask, lse - sel, 0.0)
    return nll, (shifted, lse), mask


def loss_and_grad(
    params: ModelParams, tokens: np.ndarray, targets: np.ndarray, loss_scale: float = 1.0
) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy loss and its exact gradient for a [B, T] batch.

    The loss is the mean over unmasked positions across the whole batch;
    gradients have the same shapes as the parameter tensors.
    """
    cfg = params.config
    t = params.tensors
    tokens = np.asarray(tokens, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if tokens.ndim != 2 or targets.shape != tokens.shape:
        raise DataError("tokens and targets must be matching [B, T] batches")
    dtype = params.dtype
    B, T = tokens.shape
    H, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)

    logits, cache = _forward_batch(params, tokens, need_cache=True)
    nll, (shifted, lse), mask = _nll_terms(logits, targets)
    n_out = int(mask.sum())
    if n_out == 0:
        raise DataError("all positions masked")
    loss = float(nll.sum() / n_out) * loss_scale

    probs = np.exp(shifted - lse[..., None])
    onehot_idx = np.maximum(targets, 0)
    dlogits = probs
    np.subtract.at(
        dlogits.reshape(-1, cfg.vocab_size),
        (np.arange(B * T), onehot_idx.reshape(-1)),
        1.0,
    )
    dlogits *= (mask[..., None] * (loss_scale / n_out)).astype(np.float64)
    dlogits = dlogits.astype(dtype)

    grads: dict[str, np.ndarray] = {
        name: np.zeros_like(arr) for name, arr in t.items()
    }

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    # output head and final norm
    grads["output_head"] += flat(cache["h_fin"]).T @ flat(dlogits)
    dh_fin = dlogits @ t["output_head"].T
    dx, dw = _rmsnorm_bwd(dh_fin, cache["x_fin_in"], t["final_norm"], cache["inv_fin"])
    grads["final_norm"] += dw

    cos, sin = cache["cos"], cache["sin"]
    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        lc = cache["layers"][i]

        # MLP block: x = x_mid + (silu(g) * u) @ w_down
        da = dx @ t[p + "w_down"].T
        grads[p + "w_down"] += flat(lc["act"]).T @ flat(dx)
        sg = _sigmoid(lc["g"])
        silu_g = lc["g"] * sg
        du = da * silu_g
        dg = da * lc["u"] * (sg * (1.0 + lc["g"] * (1.0 - sg)))
        grads[p + "w_up"] += flat(lc["h2"]).T @ flat(du)
        grads[p + "w_gate"] += flat(lc["h2"]).T @ flat(dg)
        dh2 = du @ t[p + "w_up"].T + dg @ t[p + "w_gate"].T
        dx_mid, dw = _rmsnorm_bwd(dh2, lc["x_mid"], t[p + "mlp_norm"], lc["inv_mlp"])
        grads[p + "mlp_norm"] += dw
        dx = dx + dx_mid

        # attention block: x = x_in + (probs @ v, heads merged) @ wo
        dctx_flat = dx @ t[p + "wo"].T
        grads[p + "wo"] += flat(lc["ctx"]).T @ flat(dx)
        dctx = dctx_flat.reshape(B, T, H, hd).transpose(0, 2, 1, 3)

        dprobs = dctx @ lc["v"].transpose(0, 1, 3, 2)
        dv = lc["probs"].transpose(0, 1, 3, 2) @ dctx
        dscores = lc["probs"] * (
            dprobs - np.sum(dprobs * lc["probs"], axis=-1, keepdims=True)
        )
        dq = (dscores @ lc["k"]) * dtype.type(scale)
        dk = (dscores.transpose(0, 1, 3, 2) @ lc["q"]) * dtype.type(scale)
        dq = _rope_rotate_back(dq, cos, sin)
        dk = _rope_rotate_back(dk, cos, sin)

        def merge(m):
            return m.transpose(0, 2, 1, 3).reshape(B, T, cfg.dim)

        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        grads[p + "wq"] += flat(lc["h"]).T @ flat(dq)
        grads[p + "wk"] += flat(lc["h"]).T @ flat(dk)
        grads[p + "wv"] += flat(lc["h"]).T @ flat(dv)
        dh = dq @ t[p + "wq"].T + dk @ t[p + "wk"].T + dv @ t[p + "wv"].T
        dx_in, dw = _rmsnorm_bwd(dh, lc["x_in"], t[p + "attn_norm"], lc["inv_attn"])
        grads[p + "attn_norm"] += dw
        dx = dx + dx_in

    demb = grads["tok_embedding"]
    np.add.at(demb, tokens.reshape(-1), flat(dx))
    return loss, grads


def backward(
    params: ModelParams, tokens, targets, loss_scale: float = 1.0
) -> dict[str, np.ndarray]:
    """Exact gradient of cross_entropy_loss w.r.t. every parameter tensor."""
    arr = _check_tokens(params.config, tokens)
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != arr.shape:
        raise DataError("targets must have the same length as tokens")
    _, grads = loss_and_grad(params, arr[None, :], tgt[None, :], loss_scale)
    return grads


def greedy_generate(
    params: ModelParams, tok: TokenizerModel, prompt: str, max_new_tokens: int
) -> str:
    """Greedy continuation of the prompt; ties resolve to the lowest token id.

    Stops at EOS, after max_new_tokens, or when the context window fills.
    Returns only the decoded continuation.
    """
    cfg = params.config
    ids = [BOS_ID] + encode(tok, prompt)
    if len(ids) >= cfg.context_len:
        raise DataError(
            f"prompt too long: {len(ids)} tokens, context_len {cfg.context_len}"
        )
    generated: list[int] = []
    while len(generated) < max_new_tokens and len(ids) < cfg.context_len:
        logits = forward(params, ids)
        nxt = int(np.argmax(logits[-1]))
        if nxt == EOS_ID:
            break
        ids.append(nxt)
        generated.append(nxt)
    return decode(tok, generated)
