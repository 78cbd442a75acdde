"""Layers with hand-written backward passes.

Every layer keeps its weights in ``self.params`` (name -> float64 array) and
exposes ``forward(...) -> (out, cache)`` and ``backward(dout, cache) ->
(dinput, grads)``. Forward passes are pure given params, inputs and the
dropout RNG; caches are plain tuples so no state leaks between calls.
"""

from __future__ import annotations

import numpy as np

PAD, UNK = 0, 1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(s, axis=-1):
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_ce(logits, target):
    """Softmax cross-entropy.

    ``logits`` is (C,) or (B, C); ``target`` an int class index or (B,) array.
    Batched losses are averaged, so the gradient is (softmax - onehot) / B.
    """
    logits = np.asarray(logits, dtype=float)
    single = logits.ndim == 1
    s = logits[None] if single else logits
    t = np.atleast_1d(np.asarray(target))
    z = s - s.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = s.shape[0]
    loss = -logp[np.arange(n), t].mean()
    grad = np.exp(logp)
    grad[np.arange(n), t] -= 1.0
    grad /= n
    return loss, (grad[0] if single else grad)


class Layer:
    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}


class Embedding(Layer):
    """Token lookup; row 0 is PAD (frozen at zero), row 1 is UNK."""

    def __init__(self, vocab_size, dim, rng=None, std=0.1, matrix=None):
        super().__init__()
        if matrix is None:
            rng = rng or np.random.default_rng(0)
            matrix = rng.normal(0.0, std, size=(vocab_size, dim))
        matrix = np.array(matrix, dtype=float)
        matrix[PAD] = 0.0
        self.params["E"] = matrix

    @property
    def dim(self):
        return self.params["E"].shape[1]

    def forward(self, ids):
        return self.params["E"][ids], (ids,)

    def backward(self, dout, cache):
        (ids,) = cache
        dE = np.zeros_like(self.params["E"])
        np.add.at(dE, ids.reshape(-1), dout.reshape(-1, dout.shape[-1]))
        dE[PAD] = 0.0
        return None, {"E": dE}


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, scale=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / (n_in + n_out)) if scale is None else scale
        self.params["W"] = rng.normal(0.0, scale, size=(n_in, n_out))
        self.params["b"] = np.zeros(n_out)

    def forward(self, x):
        return x @ self.params["W"] + self.params["b"], (x,)

    def backward(self, dout, cache):
        (x,) = cache
        x2 = x.reshape(-1, x.shape[-1])
        d2 = dout.reshape(-1, dout.shape[-1])
        grads = {"W": x2.T @ d2, "b": d2.sum(axis=0)}
        return dout @ self.params["W"].T, grads


def relu_forward(x):
    return np.maximum(x, 0.0), (x > 0)


def relu_backward(dout, cache):
    return dout * cache


def dropout_forward(x, p, rng=None, train=False):
    """Inverted dropout; identity in eval mode."""
    if not train or p <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep, keep


def dropout_backward(dout, cache):
    return dout if cache is None else dout * cache


class Conv1D(Layer):
    """Parallel 1-D convolutions of several widths over a masked sequence.

    Output channels are the concatenation over widths; 'same' padding keeps
    the sequence length, padded positions of the input must already be zero.
    """

    def __init__(self, n_in, n_filters, widths=(1, 2, 3), rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.widths = tuple(widths)
        self.n_in = n_in
        self.n_filters = n_filters
        for w in self.widths:
            scale = np.sqrt(2.0 / (w * n_in))
            self.params[f"W{w}"] = rng.normal(0.0, scale, size=(w * n_in, n_filters))
            self.params[f"b{w}"] = np.zeros(n_filters)

    @property
    def n_out(self):
        return self.n_filters * len(self.widths)

    def forward(self, x):
        B, L, D = x.shape
        outs, cols_all = [], []
        for w in self.widths:
            left = (w - 1) // 2
            xp = np.zeros((B, L + w - 1, D))
            xp[:, left:left + L] = x
            cols = np.concatenate([xp[:, k:k + L] for k in range(w)], axis=2)
            outs.append(cols @ self.params[f"W{w}"] + self.params[f"b{w}"])
            cols_all.append(cols)
        return np.concatenate(outs, axis=2), (x.shape, cols_all)

    def backward(self, dout, cache):
        (B, L, D), cols_all = cache
        dx = np.zeros((B, L, D))
        grads = {}
        F = self.n_filters
        for n, (w, cols) in enumerate(zip(self.widths, cols_all)):
            d = dout[:, :, n * F:(n + 1) * F]
            grads[f"W{w}"] = cols.reshape(-1, w * D).T @ d.reshape(-1, F)
            grads[f"b{w}"] = d.sum(axis=(0, 1))
            dcols = d @ self.params[f"W{w}"].T
            left = (w - 1) // 2
            dxp = np.zeros((B, L + w - 1, D))
            for k in range(w):
                dxp[:, k:k + L] += dcols[:, :, k * D:(k + 1) * D]
            dx += dxp[:, left:left + L]
        return dx, grads


def masked_max_forward(x, mask):
    """Max over time of (B, L, C) restricted to mask==1 positions."""
    neg = np.where(mask[:, :, None] > 0, x, -np.inf)
    idx = neg.argmax(axis=1)  # (B, C)
    out = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
    return out, (x.shape, idx)


def masked_max_backward(dout, cache):
    shape, idx = cache
    dx = np.zeros(shape)
    np.put_along_axis(dx, idx[:, None, :], dout[:, None, :], axis=1)
    return dx


class LSTM(Layer):
    """Single-direction LSTM over (B, T, D) with a (B, T) step mask.

    Masked steps carry the previous state unchanged, so right-padded batches
    give each sequence its own final state. Gate order: input, forget,
    output, candidate.
    """

    def __init__(self, n_in, n_hidden, rng=None, reverse=False):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        H = n_hidden
        self.n_hidden = H
        self.reverse = reverse
        self.params["W"] = rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, 4 * H))
        self.params["U"] = rng.normal(0.0, np.sqrt(1.0 / H), size=(H, 4 * H))
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        self.params["b"] = b

    def forward(self, x, mask=None):
        B, T, _ = x.shape
        H = self.n_hidden
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        if mask is None:
            mask = np.ones((B, T))
        xw = x @ W + b
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        hs = np.zeros((B, T, H))
        steps = []
        order = range(T - 1, -1, -1) if self.reverse else range(T)
        for t in order:
            a = xw[:, t] + h @ U
            i = sigmoid(a[:, :H])
            f = sigmoid(a[:, H:2 * H])
            o = sigmoid(a[:, 2 * H:3 * H])
            g = np.tanh(a[:, 3 * H:])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            m = mask[:, t, None]
            steps.append((t, h, c, i, f, o, g, tc, m))
            c = m * c_new + (1 - m) * c
            h = m * h_new + (1 - m) * h
            hs[:, t] = h
        return (hs, h), (x, steps)

    def backward(self, dout, cache):
        """``dout`` is (dhs, dh_last); either may be None."""
        dhs, dh_last = dout
        x, steps = cache
        B, T, D = x.shape
        H = self.n_hidden
        W, U = self.params["W"], self.params["U"]
        dW = np.zeros_like(W)
        dU = np.zeros_like(U)
        db = np.zeros(4 * H)
        dx = np.zeros((B, T, D))
        dh = np.zeros((B, H)) if dh_last is None else dh_last.copy()
        dc = np.zeros((B, H))
        for t, h_prev, c_prev, i, f, o, g, tc, m in reversed(steps):
            if dhs is not None:
                dh = dh + dhs[:, t]
            dh_new = m * dh
            dc_new = m * dc + dh_new * o * (1 - tc ** 2)
            do = dh_new * tc
            di = dc_new * g
            df = dc_new * c_prev
            dg = dc_new * i
            da = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g ** 2)], axis=1
            )
            dW += x[:, t].T @ da
            dU += h_prev.T @ da
            db += da.sum(axis=0)
            dx[:, t] = da @ W.T
            dh = da @ U.T + (1 - m) * dh
            dc = dc_new * f + (1 - m) * dc
        return dx, {"W": dW, "U": dU, "b": db}


class BiLSTM(Layer):
    def __init__(self, n_in, n_hidden, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.fwd = LSTM(n_in, n_hidden, rng)
        self.bwd = LSTM(n_in, n_hidden, rng, reverse=True)
        for k, v in self.fwd.params.items():
            self.params[f"f{k}"] = v
        for k, v in self.bwd.params.items():
            self.params[f"r{k}"] = v

    @property
    def n_out(self):
        return 2 * self.fwd.n_hidden

    def _sync(self):
        for k in self.fwd.params:
            self.fwd.params[k] = self.params[f"f{k}"]
            self.bwd.params[k] = self.params[f"r{k}"]

    def forward(self, x, mask=None):
        self._sync()
        (hf, _), cf = self.fwd.forward(x, mask)
        (hb, _), cb = self.bwd.forward(x, mask)
        return np.concatenate([hf, hb], axis=2), (cf, cb)

    def backward(self, dout, cache):
        cf, cb = cache
        H = self.fwd.n_hidden
        dxf, gf = self.fwd.backward((dout[:, :, :H], None), cf)
        dxb, gb = self.bwd.backward((dout[:, :, H:], None), cb)
        grads = {f"f{k}": v for k, v in gf.items()}
        grads.update({f"r{k}": v for k, v in gb.items()})
        return dxf + dxb, grads


class Attention(Layer):
    """Additive attention pooling: s_j = tanh(M^T h_j + b), alpha = softmax_j(s_j . c)."""

    def __init__(self, n_in, n_att, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["M"] = rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, n_att))
        self.params["b"] = np.zeros(n_att)
        self.params["c"] = rng.normal(0.0, np.sqrt(1.0 / n_att), size=n_att)

    def forward(self, h, mask=None):
        B, L, _ = h.shape
        if mask is None:
            mask = np.ones((B, L))
        s = np.tanh(h @ self.params["M"] + self.params["b"])
        e = s @ self.params["c"]
        e = np.where(mask > 0, e, -np.inf)
        alpha = softmax(e, axis=1)
        y = (alpha[:, :, None] * h).sum(axis=1)
        return (y, alpha), (h, s, alpha)

    def backward(self, dout, cache):
        dy = dout[0] if isinstance(dout, tuple) else dout
        h, s, alpha = cache
        dalpha = np.einsum("bd,bld->bl", dy, h)
        dh = alpha[:, :, None] * dy[:, None, :]
        de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        dc = np.einsum("bl,bla->a", de, s)
        dpre = de[:, :, None] * self.params["c"] * (1 - s ** 2)
        dM = h.reshape(-1, h.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
        db = dpre.sum(axis=(0, 1))
        dh += dpre @ self.params["M"].T
        return dh, {"M": dM, "b": db, "c": dc}
