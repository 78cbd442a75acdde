"""Central finite-difference checks for every hand-written backward pass.

Each case builder takes an RNG and returns ``(arrays, loss_and_grads)``:
``arrays`` maps a name to an array that is perturbed in place, and
``loss_and_grads()`` returns the scalar loss plus analytic gradients under
the same names. Losses are random projections of the layer output, so the
upstream gradient is dense and non-trivial.
"""

import numpy as np

from topicsuggest import crf
from topicsuggest.neuralnet import layers as L
from topicsuggest.neuralnet.encoders import CnnEncoder, RnnEncoder, WindowAggregator
from topicsuggest.recommenders import SoftmaxHead

H = 1e-5
REL_TOL = 1e-4


def rel_error(num, ana):
    return abs(num - ana) / max(abs(num), abs(ana), 1e-6)


def check(arrays, loss_and_grads, rng, per_array=6):
    """Worst relative error over a random sample of coordinates of every array.

    Returns None when a sampled step straddles a kink (ReLU switch or a change
    of max-pool winner): there the two one-sided slopes disagree by O(1) and
    the central difference is meaningless.
    """
    l0, grads = loss_and_grads()
    worst = 0.0
    for name, arr in arrays.items():
        g = grads[name]
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, min(per_array, flat.size), replace=False)
        for j in picks:
            old = flat[j]
            flat[j] = old + H
            lp = loss_and_grads()[0]
            flat[j] = old - H
            lm = loss_and_grads()[0]
            flat[j] = old
            fwd, bwd = (lp - l0) / H, (l0 - lm) / H
            if abs(fwd - bwd) > 1e-3 * max(1.0, abs(fwd), abs(bwd)):
                return None
            worst = max(worst, rel_error((lp - lm) / (2 * H), g.reshape(-1)[j]))
    return worst


def run_cases(make, rng, n=50, max_draws=None):
    """Check ``n`` smooth random instances; returns (worst error, redrawn count)."""
    max_draws = max_draws or 4 * n
    worst, done, redrawn = 0.0, 0, 0
    while done < n:
        if done + redrawn >= max_draws:
            raise RuntimeError(f"too many instances straddle a kink ({redrawn})")
        err = check(*make(rng), rng)
        if err is None:
            redrawn += 1
            continue
        worst = max(worst, err)
        done += 1
    return worst, redrawn


def _jitter_biases(params, rng):
    for k, v in params.items():
        if k.split(".")[-1].startswith("b"):
            v[...] = rng.normal(0.0, 0.3, v.shape)


def _mask(rng, B, T):
    lengths = rng.integers(1, T + 1, B)
    lengths[0] = T
    return (np.arange(T)[None, :] < lengths[:, None]).astype(float)


def case_dense(rng):
    n_in, n_out, B = rng.integers(2, 7, 3)
    layer = L.Dense(n_in, n_out, rng)
    x = rng.normal(size=(B, n_in))
    R = rng.normal(size=(B, n_out))
    arrays = {**layer.params, "x": x}

    def f():
        y, c = layer.forward(x)
        dx, g = layer.backward(R, c)
        return float((y * R).sum()), {**g, "x": dx}
    _jitter_biases(layer.params, rng)
    return arrays, f


def case_embedding(rng):
    V, D = int(rng.integers(3, 9)), int(rng.integers(2, 6))
    layer = L.Embedding(V, D, rng)
    ids = rng.integers(0, V, size=(3, 4))
    R = rng.normal(size=(3, 4, D))

    def f():
        y, c = layer.forward(ids)
        _, g = layer.backward(R, c)
        return float((y * R).sum()), g

    def f_rows():
        loss, g = f()
        return loss, {"E": g["E"][1:]}
    # PAD is frozen, so only the trainable rows are perturbed
    return {"E": layer.params["E"][1:]}, f_rows


def case_relu_dropout(rng):
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    R = rng.normal(size=(4, 5))
    p = float(rng.uniform(0.1, 0.6))
    seed = int(rng.integers(1 << 30))

    def f():
        a, cr = L.relu_forward(x)
        b, cd = L.dropout_forward(a, p, np.random.default_rng(seed), train=True)
        dx = L.relu_backward(L.dropout_backward(R, cd), cr)
        return float((b * R).sum()), {"x": dx}
    return {"x": x}, f


def case_softmax_ce(rng):
    B, C = int(rng.integers(1, 5)), int(rng.integers(2, 9))
    logits = rng.normal(size=(B, C)) * 2
    t = rng.integers(0, C, B)

    def f():
        loss, d = L.softmax_ce(logits, t)
        return float(loss), {"z": d}
    return {"z": logits}, f


def case_conv(rng):
    D, F = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    widths = tuple(sorted(rng.choice([1, 2, 3, 4], size=int(rng.integers(1, 4)), replace=False)))
    layer = L.Conv1D(D, F, widths, rng)
    _jitter_biases(layer.params, rng)
    x = rng.normal(size=(2, int(rng.integers(1, 7)), D))
    R = rng.normal(size=(2, x.shape[1], layer.n_out))

    def f():
        y, c = layer.forward(x)
        dx, g = layer.backward(R, c)
        return float((y * R).sum()), {**g, "x": dx}
    return {**layer.params, "x": x}, f


def case_masked_max(rng):
    B, T, C = 3, int(rng.integers(1, 7)), 4
    x = rng.normal(size=(B, T, C))
    mask = _mask(rng, B, T)
    R = rng.normal(size=(B, C))

    def f():
        y, c = L.masked_max_forward(x, mask)
        return float((y * R).sum()), {"x": L.masked_max_backward(R, c)}
    return {"x": x}, f


def case_lstm(rng):
    D, Hd, B, T = int(rng.integers(2, 5)), int(rng.integers(2, 5)), 3, int(rng.integers(1, 6))
    layer = L.LSTM(D, Hd, rng, reverse=bool(rng.integers(2)))
    _jitter_biases(layer.params, rng)
    x = rng.normal(size=(B, T, D))
    mask = _mask(rng, B, T)
    R1 = rng.normal(size=(B, T, Hd))
    R2 = rng.normal(size=(B, Hd))

    def f():
        (hs, h), c = layer.forward(x, mask)
        dx, g = layer.backward((R1, R2), c)
        return float((hs * R1).sum() + (h * R2).sum()), {**g, "x": dx}
    return {**layer.params, "x": x}, f


def case_bilstm(rng):
    D, Hd, B, T = 3, int(rng.integers(2, 4)), 2, int(rng.integers(1, 6))
    layer = L.BiLSTM(D, Hd, rng)
    _jitter_biases(layer.params, rng)
    x = rng.normal(size=(B, T, D))
    mask = _mask(rng, B, T)
    R = rng.normal(size=(B, T, 2 * Hd))

    def f():
        y, c = layer.forward(x, mask)
        dx, g = layer.backward(R * mask[:, :, None], c)
        return float((y * R * mask[:, :, None]).sum()), {**g, "x": dx}
    return {**layer.params, "x": x}, f


def case_attention(rng):
    D, A, B, T = int(rng.integers(2, 5)), int(rng.integers(2, 5)), 3, int(rng.integers(1, 6))
    layer = L.Attention(D, A, rng)
    _jitter_biases(layer.params, rng)
    h = rng.normal(size=(B, T, D))
    mask = _mask(rng, B, T)
    R = rng.normal(size=(B, D))

    def f():
        (y, _), c = layer.forward(h, mask)
        dh, g = layer.backward(R, c)
        return float((y * R).sum()), {**g, "h": dh}
    return {**layer.params, "h": h}, f


def _encoder_case(enc, rng, V):
    _jitter_biases(enc.params, rng)
    B, T = 3, int(rng.integers(1, 6))
    mask = _mask(rng, B, T)
    ids = np.where(mask > 0, rng.integers(1, V, (B, T)), 0)
    R = rng.normal(size=(B, enc.n_out))

    def f():
        y, c = enc.forward(ids, mask)
        _, g = enc.backward(R, c)
        return float((y * R).sum()), g
    arrays = {k: v for k, v in enc.params.items() if not k.endswith(".E")}
    arrays["emb.E"] = enc.params["emb.E"][1:]

    def f_view():
        loss, g = f()
        g = dict(g)
        g["emb.E"] = g["emb.E"][1:]
        return loss, g
    return arrays, f_view


def case_cnn_encoder(rng):
    V = 12
    enc = CnnEncoder(V, int(rng.integers(2, 5)), int(rng.integers(2, 4)), widths=(1, 2, 3),
                     n_layers=int(rng.integers(1, 4)), rng=rng)
    return _encoder_case(enc, rng, V)


def case_rnn_encoder(rng):
    V = 12
    enc = RnnEncoder(V, int(rng.integers(2, 5)), int(rng.integers(2, 4)), rng=rng)
    return _encoder_case(enc, rng, V)


def case_window_aggregator(rng):
    n_in, m = int(rng.integers(2, 6)), int(rng.integers(1, 6))
    agg = WindowAggregator(n_in, int(rng.integers(2, 5)), int(rng.integers(2, 6)), 8, dropout=0.5, rng=rng)
    _jitter_biases(agg.params, rng)
    x = rng.normal(size=(3, m, n_in))
    t = rng.integers(0, 8, 3)
    seed = int(rng.integers(1 << 30))

    def f():
        logits, c = agg.forward(x, train=True, rng=np.random.default_rng(seed))
        loss, d = L.softmax_ce(logits, t)
        dx, g = agg.backward(d, c)
        return float(loss), {**g, "x": dx}
    return {**agg.params, "x": x}, f


def case_softmax_head(rng):
    n_in = int(rng.integers(2, 10))
    head = SoftmaxHead(n_in, hidden=int(rng.choice([0, 4])), seed=int(rng.integers(1000)))
    _jitter_biases(head.params, rng)
    X = rng.normal(size=(5, n_in))
    t = rng.integers(0, 8, 5)

    def f():
        logits, caches = head._forward(X)
        loss, d = L.softmax_ce(logits, t)
        return float(loss), head._backward(d, caches)
    return head.params, f


def case_crf_nll(rng, use_cf=None):
    from test_crf import random_fvs
    use_cf = bool(rng.integers(2)) if use_cf is None else use_cf
    seqs = []
    for k in rng.integers(1, 5, int(rng.integers(1, 4))):
        seqs.append((random_fvs(rng, int(k)), rng.integers(0, crf.N_LABELS, int(k)), rng.normal(size=(int(k), 8))))
    ds = crf.CrfDataset.from_sequences(seqs, use_cf)
    cfg = crf.CrfTrainConfig()
    w = rng.normal(size=crf.n_weights(use_cf)) * 0.3

    def f():
        loss, g = crf.nll_and_gradient(w, ds, cfg)
        return loss, {"w": g}
    return {"w": w}, f


LAYER_CASES = {
    "dense": case_dense,
    "embedding": case_embedding,
    "relu+dropout": case_relu_dropout,
    "softmax_ce": case_softmax_ce,
    "conv1d": case_conv,
    "masked_max": case_masked_max,
    "lstm": case_lstm,
    "bilstm": case_bilstm,
    "attention": case_attention,
    "cnn_encoder": case_cnn_encoder,
    "rnn_encoder": case_rnn_encoder,
    "window_aggregator": case_window_aggregator,
    "softmax_head": case_softmax_head,
}
