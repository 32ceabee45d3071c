"""GRU stack, multi-head self-attention and the regression-token encoder.

Everything works on batches: sequences are ``(B, T, D)`` with a boolean
``(B, T)`` validity mask. Row-vector convention throughout, so an input
projection is ``x @ W`` with ``W`` of shape ``(D_in, D_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, ShapeError, Tensor

GATES = ("z", "r", "n")


def _sig(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- GRU


def gru_layer(x: Tensor, W: list[Tensor], U: list[Tensor], b: list[Tensor], mask: np.ndarray | None = None) -> Tensor:
    """One GRU layer over a ``(B, T, D)`` batch, initial state zero.

    Gates follow z = σ(xW_z + hU_z + b_z), r = σ(xW_r + hU_r + b_r),
    n = tanh(xW_n + r ⊙ (hU_n) + b_n), h' = (1 − z) ⊙ n + z ⊙ h.
    Where ``mask`` is False the previous state is carried through unchanged,
    so masked frames never influence later valid frames.
    """
    if x.ndim != 3:
        raise ShapeError(f"gru: expected (B, T, D) input, got {x.shape}")
    B, T, D = x.shape
    if T == 0:
        raise ValueError("gru: empty sequence")
    if W[0].shape[0] != D:
        raise ShapeError(f"gru: input dim {D} does not match weights {W[0].shape}")
    H = U[0].shape[0]
    dt = x.data.dtype
    Wc = np.concatenate([w.data for w in W], axis=1)
    Uc = np.concatenate([u.data for u in U], axis=1)
    bc = np.concatenate([v.data for v in b])
    X2 = x.data.reshape(B * T, D)
    X = x.data
    m = None if mask is None else np.asarray(mask, dtype=dt).reshape(B, T, 1)

    out = np.empty((B, T, H), dtype=dt)
    zs = np.empty_like(out)
    rs = np.empty_like(out)
    ns = np.empty_like(out)
    uns = np.empty_like(out)
    hprev = np.empty_like(out)
    h = np.zeros((B, H), dtype=dt)
    for t in range(T):
        hU = h @ Uc
        # per-step projection keeps outputs bit-identical under truncation
        a = X[:, t] @ Wc + bc
        z = _sig(a[:, :H] + hU[:, :H])
        r = _sig(a[:, H:2 * H] + hU[:, H:2 * H])
        un = hU[:, 2 * H:]
        n = np.tanh(a[:, 2 * H:] + r * un)
        hn = (1.0 - z) * n + z * h
        if m is not None:
            mt = m[:, t]
            hn = mt * hn + (1.0 - mt) * h
        hprev[:, t] = h
        zs[:, t], rs[:, t], ns[:, t], uns[:, t] = z, r, n, un
        h = hn
        out[:, t] = h

    def bwd(g):
        dWx = np.empty((B, T, 3 * H), dtype=dt)
        dUc = np.zeros_like(Uc)
        dh_next = np.zeros((B, H), dtype=dt)
        for t in range(T - 1, -1, -1):
            dh = g[:, t] + dh_next
            if m is not None:
                mt = m[:, t]
                carry = (1.0 - mt) * dh
                dh = mt * dh
            else:
                carry = 0.0
            z, r, n, un, hp = zs[:, t], rs[:, t], ns[:, t], uns[:, t], hprev[:, t]
            dz = dh * (hp - n)
            dn = dh * (1.0 - z)
            dan = dn * (1.0 - n * n)
            dar = dan * un * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dWx[:, t, :H] = daz
            dWx[:, t, H:2 * H] = dar
            dWx[:, t, 2 * H:] = dan
            dhU = np.concatenate([daz, dar, dan * r], axis=1)
            dUc += hp.T @ dhU
            dh_next = dh * z + dhU @ Uc.T + carry
        dW2 = dWx.reshape(B * T, 3 * H)
        dWc = X2.T @ dW2
        dbc = dW2.sum(axis=0)
        dX = (dW2 @ Wc.T).reshape(B, T, D)
        gW = np.split(dWc, 3, axis=1)
        gU = np.split(dUc, 3, axis=1)
        gb = np.split(dbc, 3)
        return (dX, *gW, *gU, *gb)

    return ad.custom_op("gru", out, (x, *W, *U, *b), bwd)


def gru_params(store: ParamStore, prefix: str, layer: int) -> tuple[list[Tensor], list[Tensor], list[Tensor]]:
    base = f"{prefix}.layer{layer}"
    W = [store[f"{base}.w_{g}"] for g in GATES]
    U = [store[f"{base}.u_{g}"] for g in GATES]
    b = [store[f"{base}.b_{g}"] for g in GATES]
    return W, U, b


def gru_forward(x: Tensor, store: ParamStore, prefix: str, n_layers: int, mask: np.ndarray | None = None) -> Tensor:
    """Stacked GRU; layer ``l+1`` consumes the hidden sequence of layer ``l``."""
    h = x
    for layer in range(n_layers):
        h = gru_layer(h, *gru_params(store, prefix, layer), mask=mask)
    return h


def gru_reference(seq: Tensor, W: list[Tensor], U: list[Tensor], b: list[Tensor]) -> Tensor:
    """Single-sequence GRU built from primitive tape ops (slow; used as a cross-check)."""
    T = seq.shape[0]
    H = U[0].shape[0]
    h = Tensor(np.zeros((1, H), dtype=seq.data.dtype))
    outs = []
    for t in range(T):
        xt = ad.index(seq, slice(t, t + 1))
        z = ad.sigmoid(ad.add_bias(ad.add(ad.matmul(xt, W[0]), ad.matmul(h, U[0])), b[0]))
        r = ad.sigmoid(ad.add_bias(ad.add(ad.matmul(xt, W[1]), ad.matmul(h, U[1])), b[1]))
        n = ad.tanh(ad.add_bias(ad.add(ad.matmul(xt, W[2]), ad.mul(r, ad.matmul(h, U[2]))), b[2]))
        one_minus_z = ad.sub(Tensor(np.ones_like(z.data)), z)
        h = ad.add(ad.mul(one_minus_z, n), ad.mul(z, h))
        outs.append(h)
    return ad.concat(outs, axis=0)


# ---------------------------------------------------------------- attention


@dataclass
class AttentionRecord:
    """Attention weights of one encoder block, shape ``(B, heads, L, L)``."""

    weights: np.ndarray
    key_mask: np.ndarray = field(repr=False)

    def regression_row(self) -> np.ndarray:
        """Per-frame weights from the regression token, averaged over heads: ``(B, L-1)``."""
        return self.weights[:, :, 0, 1:].mean(axis=1)


def _linear(x: Tensor, w: Tensor) -> Tensor:
    B, L, d = x.shape
    return ad.reshape(ad.matmul(ad.reshape(x, (B * L, d)), w), (B, L, w.shape[1]))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, d = x.shape
    dk = d // heads
    return ad.reshape(ad.transpose(ad.reshape(x, (B, L, heads, dk)), (0, 2, 1, 3)), (B * heads, L, dk))


def mha_forward(
    tokens: Tensor, store: ParamStore, prefix: str, heads: int, key_mask: np.ndarray
) -> tuple[Tensor, AttentionRecord]:
    """Scaled dot-product self-attention over ``(B, L, d)`` tokens."""
    B, L, d = tokens.shape
    if d % heads:
        raise ShapeError(f"attention: d_model {d} not divisible by {heads} heads")
    key_mask = np.asarray(key_mask, dtype=bool)
    if key_mask.shape != (B, L):
        raise ShapeError(f"attention: mask {key_mask.shape} vs tokens {tokens.shape}")
    dk = d // heads
    q = _split_heads(_linear(tokens, store[f"{prefix}.w_q"]), heads)
    k = _split_heads(_linear(tokens, store[f"{prefix}.w_k"]), heads)
    v = _split_heads(_linear(tokens, store[f"{prefix}.w_v"]), heads)
    ctx, weights = ad.attention_core(q, k, v, key_mask, heads)
    ctx = ad.reshape(ad.transpose(ad.reshape(ctx, (B, heads, L, dk)), (0, 2, 1, 3)), (B, L, d))
    out = _linear(ctx, store[f"{prefix}.w_o"])
    return out, AttentionRecord(weights, key_mask)


def mha_reference(
    tokens: Tensor, store: ParamStore, prefix: str, heads: int, key_mask: np.ndarray
) -> Tensor:
    """Unfused attention built from primitive ops; used to cross-check ``mha_forward``."""
    B, L, d = tokens.shape
    dk = d // heads
    q = _split_heads(_linear(tokens, store[f"{prefix}.w_q"]), heads)
    k = _split_heads(_linear(tokens, store[f"{prefix}.w_k"]), heads)
    v = _split_heads(_linear(tokens, store[f"{prefix}.w_v"]), heads)
    scores = ad.scale(ad.bmm(q, ad.transpose(k, (0, 2, 1))), float(1.0 / np.sqrt(dk)))
    scores = ad.mask_keys(ad.reshape(scores, (B, heads, L, L)), key_mask)
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.bmm(ad.reshape(attn, (B * heads, L, L)), v)
    ctx = ad.reshape(ad.transpose(ad.reshape(ctx, (B, heads, L, dk)), (0, 2, 1, 3)), (B, L, d))
    return _linear(ctx, store[f"{prefix}.w_o"])


def _ffn(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    B, L, d = x.shape
    flat = ad.reshape(x, (B * L, d))
    hid = ad.relu(ad.add_bias(ad.matmul(flat, store[f"{prefix}.w1"]), store[f"{prefix}.b1"]))
    out = ad.add_bias(ad.matmul(hid, store[f"{prefix}.w2"]), store[f"{prefix}.b2"])
    return ad.reshape(out, (B, L, d))


def encoder_block(
    x: Tensor,
    store: ParamStore,
    prefix: str,
    heads: int,
    key_mask: np.ndarray,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, AttentionRecord]:
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""
    a_in = ad.layer_norm(x, store[f"{prefix}.ln1.gamma"], store[f"{prefix}.ln1.beta"])
    a_out, rec = mha_forward(a_in, store, f"{prefix}.attn", heads, key_mask)
    x = ad.add(x, ad.dropout(a_out, dropout, rng))
    f_in = ad.layer_norm(x, store[f"{prefix}.ln2.gamma"], store[f"{prefix}.ln2.beta"])
    x = ad.add(x, ad.dropout(_ffn(f_in, store, f"{prefix}.ffn"), dropout, rng))
    return x, rec


def encoder_forward(
    frames: Tensor,
    store: ParamStore,
    prefix: str,
    n_blocks: int,
    heads: int,
    mask: np.ndarray,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[AttentionRecord]]:
    """Prepend the regression token, run the blocks, return its final ``(B, d)`` state.

    Dropout is applied only when ``rng`` is given (training mode).
    """
    B, T, d = frames.shape
    mask = np.asarray(mask, dtype=bool)
    if T == 0 or not mask.any(axis=1).all():
        raise ValueError("encoder: every sequence needs at least one valid frame")
    token = store[f"{prefix}.reg_token"]
    if token.shape != (d,):
        raise ShapeError(f"encoder: regression token {token.shape} vs d_model {d}")
    tok = ad.reshape(ad.concat([token] * B, axis=0), (B, 1, d))
    x = ad.concat([tok, frames], axis=1)
    key_mask = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)
    records = []
    for i in range(n_blocks):
        x, rec = encoder_block(x, store, f"{prefix}.block{i}", heads, key_mask, dropout, rng)
        records.append(rec)
    return ad.reshape(ad.index(x, (slice(None), slice(0, 1))), (B, d)), records


def extract_regression_attention(records: list[AttentionRecord], lengths) -> list[np.ndarray]:
    """Head-averaged attention from the regression token to each frame, final block.

    The self-attention entry is dropped and the remainder is not renormalised.
    Returns one vector per batch item, truncated to that item's length.
    """
    row = records[-1].regression_row()
    lengths = np.broadcast_to(np.asarray(lengths), (row.shape[0],))
    return [row[i, : int(n)].copy() for i, n in enumerate(lengths)]
