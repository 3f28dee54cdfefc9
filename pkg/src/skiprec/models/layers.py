"""Differentiable building blocks with hand-written backward passes.

Each ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
takes the upstream gradient plus the cache and returns the input gradient and
a dict of parameter gradients keyed by the short parameter name.  All arrays
are float64.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

LN_EPS = 1e-6
_NEG_INF = -1e30


def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dout, x, w):
    d = w.shape[0]
    x2 = x.reshape(-1, d)
    g2 = dout.reshape(-1, w.shape[1])
    return dout @ w.T, {"w": x2.T @ g2, "b": g2.sum(axis=0)}


def layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_backward(dout, cache):
    xhat, inv, g = cache
    d = xhat.shape[-1]
    flat_dout = dout.reshape(-1, d)
    grads = {"g": (flat_dout * xhat.reshape(-1, d)).sum(axis=0), "b": flat_dout.sum(axis=0)}
    dxhat = dout * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, grads


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    return x * cdf, (x, cdf)


def gelu_backward(dout, cache):
    x, cdf = cache
    return dout * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# multi-head self-attention


def attention_forward(x, p, heads, allowed):
    """Self-attention over ``x`` (B, L, d).  ``allowed`` is a boolean
    (B, L, L) array; entry [b, i, j] permits query i to read key j."""
    B, L, d = x.shape
    dh = d // heads
    q = x @ p["wq"] + p["bq"]
    k = x @ p["wk"] + p["bk"]
    v = x @ p["wv"] + p["bv"]

    def split(t):
        return t.reshape(B, L, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    scale = 1.0 / np.sqrt(dh)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    mask = allowed[:, None, :, :]
    scores = np.where(mask, scores, _NEG_INF)
    scores -= scores.max(axis=-1, keepdims=True)
    a = np.exp(scores) * mask
    a /= a.sum(axis=-1, keepdims=True)
    ctx = (a @ vh).transpose(0, 2, 1, 3).reshape(B, L, d)
    out = ctx @ p["wo"] + p["bo"]
    return out, (x, qh, kh, vh, a, ctx, scale, heads)


def attention_backward(dout, p, cache):
    x, qh, kh, vh, a, ctx, scale, heads = cache
    B, L, d = x.shape
    dh = d // heads
    grads = {}
    dctx, g = linear_backward(dout, ctx, p["wo"])
    grads["wo"], grads["bo"] = g["w"], g["b"]
    dctx_h = dctx.reshape(B, L, heads, dh).transpose(0, 2, 1, 3)
    da = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ dctx_h
    dscores = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, L, d)

    dx = np.zeros_like(x)
    for name, dt in (("q", merge(dqh)), ("k", merge(dkh)), ("v", merge(dvh))):
        dxi, g = linear_backward(dt, x, p["w" + name])
        dx += dxi
        grads["w" + name], grads["b" + name] = g["w"], g["b"]
    return dx, grads


# ---------------------------------------------------------------------------
# pre-LN transformer block


def block_forward(x, p, heads, allowed, activation="relu"):
    h1, ln1 = layernorm_forward(x, p["ln1.g"], p["ln1.b"])
    att, att_c = attention_forward(h1, _sub(p, "attn."), heads, allowed)
    x1 = x + att
    h2, ln2 = layernorm_forward(x1, p["ln2.g"], p["ln2.b"])
    f1, _ = linear_forward(h2, p["ffn.w1"], p["ffn.b1"])
    if activation == "gelu":
        f1a, act_c = gelu_forward(f1)
    else:
        f1a, act_c = relu_forward(f1)
    f2, _ = linear_forward(f1a, p["ffn.w2"], p["ffn.b2"])
    out = x1 + f2
    return out, (ln1, att_c, ln2, h2, f1a, act_c, activation)


def block_backward(dout, p, cache):
    ln1, att_c, ln2, h2, f1a, act_c, activation = cache
    grads = {}
    df1a, g = linear_backward(dout, f1a, p["ffn.w2"])
    grads["ffn.w2"], grads["ffn.b2"] = g["w"], g["b"]
    df1 = gelu_backward(df1a, act_c) if activation == "gelu" else relu_backward(df1a, act_c)
    dh2, g = linear_backward(df1, h2, p["ffn.w1"])
    grads["ffn.w1"], grads["ffn.b1"] = g["w"], g["b"]
    dx1_ln, g = layernorm_backward(dh2, ln2)
    grads["ln2.g"], grads["ln2.b"] = g["g"], g["b"]
    dx1 = dout + dx1_ln
    dh1, g = attention_backward(dx1, _sub(p, "attn."), att_c)
    grads.update({"attn." + k: v for k, v in g.items()})
    dx_ln, g = layernorm_backward(dh1, ln1)
    grads["ln1.g"], grads["ln1.b"] = g["g"], g["b"]
    return dx1 + dx_ln, grads


# ---------------------------------------------------------------------------
# gated recurrent unit (gate order: reset, update, candidate)


def gru_forward(x, p):
    B, L, d = x.shape
    wx, wh, bx, bh = p["wx"], p["wh"], p["bx"], p["bh"]
    gx = x @ wx + bx  # (B, L, 3d)
    h = np.zeros((B, d))
    hs = np.zeros((B, L, d))
    steps = []
    for t in range(L):
        gh = h @ wh + bh
        r = sigmoid(gx[:, t, :d] + gh[:, :d])
        z = sigmoid(gx[:, t, d:2 * d] + gh[:, d:2 * d])
        hn = gh[:, 2 * d:]
        n = np.tanh(gx[:, t, 2 * d:] + r * hn)
        h_new = (1.0 - z) * n + z * h
        steps.append((h, r, z, n, hn))
        h = h_new
        hs[:, t] = h
    return hs, (x, steps)


def gru_backward(dhs, p, cache):
    x, steps = cache
    B, L, d = x.shape
    wx, wh = p["wx"], p["wh"]
    dgx = np.zeros((B, L, 3 * d))
    dwh = np.zeros_like(wh)
    dbh = np.zeros(3 * d)
    dh_next = np.zeros((B, d))
    for t in range(L - 1, -1, -1):
        h_prev, r, z, n, hn = steps[t]
        dh = dhs[:, t] + dh_next
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z
        dan = dn * (1.0 - n * n)
        dr = dan * hn
        dhn = dan * r
        dar = dr * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgx[:, t, :d] = dar
        dgx[:, t, d:2 * d] = daz
        dgx[:, t, 2 * d:] = dan
        dgh = np.concatenate([dar, daz, dhn], axis=1)
        dwh += h_prev.T @ dgh
        dbh += dgh.sum(axis=0)
        dh_prev += dgh @ wh.T
        dh_next = dh_prev
    dx, g = linear_backward(dgx, x, wx)
    return dx, {"wx": g["w"], "bx": g["b"], "wh": dwh, "bh": dbh}


# ---------------------------------------------------------------------------
# convolutional sequence embedding (horizontal + vertical filter banks)


def _windows(x, width):
    """(B, L, d) -> (B, L, width, d); window t holds rows t-width+1..t with
    zero rows before the sequence start."""
    B, L, d = x.shape
    padded = np.concatenate([np.zeros((B, width - 1, d)), x], axis=1)
    idx = np.arange(L)[:, None] + np.arange(width)[None, :]
    return padded[:, idx, :]


def _unwindow(dwin, width):
    B, L, _, d = dwin.shape
    dpadded = np.zeros((B, L + width - 1, d))
    for j in range(width):
        dpadded[:, j:j + L] += dwin[:, :, j]
    return dpadded[:, width - 1:]


def caser_forward(x, p, window, heights):
    """Per-position causal Caser: each position convolves the ``window`` most
    recent embeddings.  Horizontal filters of each height are ReLU'd and
    max-pooled over time; vertical filters are linear combinations of rows."""
    win = _windows(x, window)  # (B, L, W, d)
    B, L, W, d = win.shape
    feats, hcache = [], []
    for h in heights:
        w, b = p[f"h{h}.w"], p[f"h{h}.b"]  # (nh, h, d), (nh,)
        n_pos = W - h + 1
        idx = np.arange(n_pos)[:, None] + np.arange(h)[None, :]
        patches = win[:, :, idx, :]  # (B, L, n_pos, h, d)
        conv = np.einsum("blphd,fhd->blpf", patches, w) + b
        act = np.maximum(conv, 0.0)
        arg = act.argmax(axis=2)  # (B, L, nh)
        pooled = np.take_along_axis(act, arg[:, :, None, :], axis=2)[:, :, 0, :]
        feats.append(pooled)
        hcache.append((h, idx, patches, conv, arg))
    vw, vb = p["v.w"], p["v.b"]  # (nv, W), (nv,)
    vert = np.einsum("bljd,fj->blfd", win, vw) + vb[:, None]
    feats.append(vert.reshape(B, L, -1))
    z0 = np.concatenate(feats, axis=-1)
    z1, _ = linear_forward(z0, p["fc.w"], p["fc.b"])
    z1a, relu_mask = relu_forward(z1)
    out, _ = linear_forward(z1a, p["out.w"], p["out.b"])
    return out, (win, hcache, z0, z1a, relu_mask, window)


def caser_backward(dout, p, cache):
    win, hcache, z0, z1a, relu_mask, window = cache
    B, L, W, d = win.shape
    grads = {}
    dz1a, g = linear_backward(dout, z1a, p["out.w"])
    grads["out.w"], grads["out.b"] = g["w"], g["b"]
    dz1 = relu_backward(dz1a, relu_mask)
    dz0, g = linear_backward(dz1, z0, p["fc.w"])
    grads["fc.w"], grads["fc.b"] = g["w"], g["b"]

    dwin = np.zeros_like(win)
    offset = 0
    for h, idx, patches, conv, arg in hcache:
        nh = p[f"h{h}.w"].shape[0]
        dpooled = dz0[..., offset:offset + nh]
        offset += nh
        dact = np.zeros_like(conv)
        np.put_along_axis(dact, arg[:, :, None, :], dpooled[:, :, None, :], axis=2)
        dconv = dact * (conv > 0)
        grads[f"h{h}.w"] = np.einsum("blpf,blphd->fhd", dconv, patches)
        grads[f"h{h}.b"] = dconv.sum(axis=(0, 1, 2))
        dpatches = np.einsum("blpf,fhd->blphd", dconv, p[f"h{h}.w"])
        n_pos = idx.shape[0]
        for j in range(h):
            dwin[:, :, j:j + n_pos] += dpatches[:, :, :, j]
    nv = p["v.w"].shape[0]
    dvert = dz0[..., offset:].reshape(B, L, nv, d)
    grads["v.w"] = np.einsum("blfd,bljd->fj", dvert, win)
    grads["v.b"] = dvert.sum(axis=(0, 1, 3))
    dwin += np.einsum("blfd,fj->bljd", dvert, p["v.w"])
    return _unwindow(dwin, window), grads


def _sub(p, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}
