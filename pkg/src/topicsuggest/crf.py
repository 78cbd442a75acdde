"""Linear-chain CRF over turn labels.

Labels (18, fixed order): Accept(T) for the eight suggestible topics, then
Reject(T) in the same topic order, then FollowUp, then Chat.

Observations are turned into an attribute vector per position: one indicator
per nonzero feature-vector coordinate (the +1 and -1 values of a topic
response are separate attributes), a constant bias attribute and, for the
hybrid model, eight real-valued collaborative-filtering scores. State
weights pair every attribute with every label; transition weights pair
label bigrams, once unconditioned and once per time of day.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .corpus import (
    CHAT,
    FOLLOW_UP,
    N_SUGGESTIBLE,
    SUGGESTIBLE,
    Conversation,
    TurnLabel,
    promote_rejections,
    training_labels,
)
from .features import FV_DIM, FV_LAYOUT_VERSION, FV_SLICES, conversation_fvs
from .neuralnet.optim import LbfgsConfig, lbfgs_minimize

log = logging.getLogger(__name__)

LABELS: tuple[TurnLabel, ...] = (
    tuple(TurnLabel.accept(t) for t in SUGGESTIBLE)
    + tuple(TurnLabel.reject(t) for t in SUGGESTIBLE)
    + (FOLLOW_UP, CHAT)
)
LABEL_INDEX = {lab: k for k, lab in enumerate(LABELS)}
N_LABELS = len(LABELS)
ACCEPT_SLICE = slice(0, N_SUGGESTIBLE)

_TR = FV_SLICES["topic_response"]
_GENDER = FV_SLICES["gender"].start
_TOD = FV_SLICES["time_of_day"]
N_TOD = _TOD.stop - _TOD.start
N_FV_ATTR = FV_DIM + (_TR.stop - _TR.start) + 1  # topic responses and gender split by sign
N_CF = N_SUGGESTIBLE


def _fv_columns():
    """For each fv coordinate, (attribute for positive value, attribute for negative value)."""
    cols, a = [], 0
    for k in range(FV_DIM):
        if _TR.start <= k < _TR.stop or k == _GENDER:
            cols.append((a, a + 1))
            a += 2
        else:
            cols.append((a, None))
            a += 1
    return cols, a


_FV_COLUMNS, _N = _fv_columns()
assert _N == N_FV_ATTR
BIAS_ATTR = N_FV_ATTR


def n_attributes(use_cf: bool) -> int:
    return N_FV_ATTR + 1 + (N_CF if use_cf else 0)


def fv_to_attributes(fv: np.ndarray, cf: Optional[np.ndarray] = None) -> np.ndarray:
    """Attribute matrix for (n, 68) feature vectors, plus optional (n, 8) CF scores."""
    fv = np.atleast_2d(np.asarray(fv, dtype=float))
    n = fv.shape[0]
    X = np.zeros((n, n_attributes(cf is not None)))
    for k, (pos, neg) in enumerate(_FV_COLUMNS):
        col = fv[:, k]
        if neg is None:
            X[:, pos] = col != 0
        else:
            X[:, pos] = col > 0
            X[:, neg] = col < 0
    X[:, BIAS_ATTR] = 1.0
    if cf is not None:
        X[:, BIAS_ATTR + 1:] = np.atleast_2d(cf)
    return X


def time_index(fv: np.ndarray) -> np.ndarray:
    fv = np.atleast_2d(fv)
    return fv[:, _TOD].argmax(axis=1)


# ----------------------------------------------------------------------
# model

@dataclass
class CrfTrainConfig:
    l1: float = 0.03
    l2: float = 0.01
    memory: int = 10
    max_iter: int = 100
    gtol: float = 1e-4
    ftol: float = 1e-9
    window: int = 5
    whole_conversations: bool = False

    def __post_init__(self):
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("regularization strengths must be nonnegative")


@dataclass
class CrfModel:
    weights: np.ndarray
    use_cf: bool = False
    fv_layout_version: str = FV_LAYOUT_VERSION
    converged: bool = True
    history: list = field(default_factory=list)

    @classmethod
    def zeros(cls, use_cf=False):
        return cls(np.zeros(n_weights(use_cf)), use_cf)

    @property
    def n_attr(self):
        return n_attributes(self.use_cf)

    def split(self, w=None):
        return split_weights(self.weights if w is None else w, self.use_cf)

    def feature_index(self) -> dict:
        """Weight slot of every (attribute, label) and (time, prev, label) feature."""
        A = self.n_attr
        idx = {("state", a, y): a * N_LABELS + y for a in range(A) for y in range(N_LABELS)}
        off = A * N_LABELS
        for p, y in itertools.product(range(N_LABELS), repeat=2):
            idx[("trans", p, y)] = off + p * N_LABELS + y
        off += N_LABELS * N_LABELS
        for t in range(N_TOD):
            for p, y in itertools.product(range(N_LABELS), repeat=2):
                idx[("trans_tod", t, p, y)] = off + (t * N_LABELS + p) * N_LABELS + y
        return idx


def n_weights(use_cf: bool) -> int:
    return n_attributes(use_cf) * N_LABELS + (1 + N_TOD) * N_LABELS * N_LABELS


def split_weights(w, use_cf):
    A = n_attributes(use_cf)
    L = N_LABELS
    ws = w[: A * L].reshape(A, L)
    wt = w[A * L: A * L + L * L].reshape(L, L)
    wtt = w[A * L + L * L:].reshape(N_TOD, L, L)
    return ws, wt, wtt


def penalty_mask(use_cf: bool) -> np.ndarray:
    """1 for penalized weights; the per-label bias weights are left free."""
    mask = np.ones(n_weights(use_cf))
    ws, _, _ = split_weights(mask, use_cf)
    ws[BIAS_ATTR] = 0.0
    return mask


def activate_features(fv, label: int, prev_label: Optional[int], cf=None, use_cf=None) -> list[tuple[int, float]]:
    """Active (weight slot, value) pairs for one position and candidate label pair."""
    use_cf = (cf is not None) if use_cf is None else use_cf
    x = fv_to_attributes(fv, None if cf is None else cf)[0]
    if use_cf and cf is None:
        x = np.concatenate([x, np.zeros(N_CF)])
    A = n_attributes(use_cf)
    out = [(int(a) * N_LABELS + label, float(x[a])) for a in np.flatnonzero(x)]
    if prev_label is not None:
        off = A * N_LABELS
        out.append((off + prev_label * N_LABELS + label, 1.0))
        t = int(time_index(fv)[0])
        off += N_LABELS * N_LABELS
        out.append((off + (t * N_LABELS + prev_label) * N_LABELS + label, 1.0))
    return sorted(out)


# ----------------------------------------------------------------------
# inference on explicit potentials

def _lse(a, axis):
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def forward_backward(emit: np.ndarray, trans: np.ndarray):
    """Log-space forward-backward for one sequence.

    ``emit`` is (T, L); ``trans`` is (L, L) or (T-1, L, L) with entry
    [p, y] scoring the step from label p to label y. Returns logZ, node
    marginals (T, L), edge marginals (T-1, L, L) and the forward logZ
    computed from the backward pass as a check value.
    """
    emit = np.asarray(emit, dtype=float)
    if emit.ndim != 2 or emit.shape[0] == 0:
        raise ValueError("need a nonempty (T, L) emission matrix")
    if not (np.all(np.isfinite(emit)) and np.all(np.isfinite(trans))):
        raise FloatingPointError("non-finite potentials")
    T, L = emit.shape
    tr = np.broadcast_to(trans, (max(T - 1, 1), L, L))
    alpha = np.zeros((T, L))
    beta = np.zeros((T, L))
    alpha[0] = emit[0]
    for t in range(1, T):
        alpha[t] = _lse(alpha[t - 1][:, None] + tr[t - 1], axis=0) + emit[t]
    for t in range(T - 2, -1, -1):
        beta[t] = _lse(tr[t] + (emit[t + 1] + beta[t + 1])[None, :], axis=1)
    logZ = float(_lse(alpha[-1], axis=0))
    logZ_b = float(_lse(emit[0] + beta[0], axis=0))
    node = np.exp(alpha + beta - logZ)
    edge = np.zeros((T - 1, L, L))
    for t in range(T - 1):
        edge[t] = np.exp(alpha[t][:, None] + tr[t] + (emit[t + 1] + beta[t + 1])[None, :] - logZ)
    return logZ, node, edge, logZ_b


def viterbi(emit: np.ndarray, trans: np.ndarray):
    emit = np.asarray(emit, dtype=float)
    T, L = emit.shape
    tr = np.broadcast_to(trans, (max(T - 1, 1), L, L))
    delta = emit[0].copy()
    back = np.zeros((T, L), dtype=int)
    for t in range(1, T):
        cand = delta[:, None] + tr[t - 1]
        back[t] = cand.argmax(axis=0)
        delta = cand.max(axis=0) + emit[t]
    path = [int(delta.argmax())]
    for t in range(T - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    return path[::-1], float(delta.max())


def sequence_score(emit, trans, path):
    T, L = np.asarray(emit).shape
    tr = np.broadcast_to(trans, (max(T - 1, 1), L, L))
    s = sum(emit[t][y] for t, y in enumerate(path))
    s += sum(tr[t - 1][path[t - 1], path[t]] for t in range(1, T))
    return float(s)


def potentials(model: CrfModel, fvs: np.ndarray, cf: Optional[np.ndarray] = None, w=None):
    """Emission (T, L) and transition (L, L) potentials for one sequence."""
    ws, wt, wtt = model.split(w)
    if model.use_cf and cf is None:
        cf = np.zeros((len(fvs), N_CF))
    X = fv_to_attributes(fvs, cf if model.use_cf else None)
    emit = X @ ws
    tod = int(time_index(fvs)[-1])
    return emit, wt + wtt[tod]


def log_partition_and_marginals(model: CrfModel, fvs, cf=None):
    if not np.all(np.isfinite(model.weights)):
        raise FloatingPointError("NaN or infinite CRF weights")
    emit, trans = potentials(model, np.atleast_2d(fvs), cf)
    logZ, node, edge, _ = forward_backward(emit, trans)
    return logZ, node, edge


# ----------------------------------------------------------------------
# training

def _bucket(seqs, use_cf):
    """Group (fvs, labels, cf) triples by (length, time of day); keeps original positions."""
    buckets: dict = {}
    for pos, (fvs, labels, cf) in enumerate(seqs):
        fvs = np.atleast_2d(fvs)
        if use_cf and cf is None:
            cf = np.zeros((len(fvs), N_CF))
        key = (len(fvs), int(time_index(fvs)[-1]))
        b = buckets.setdefault(key, ([], [], []))
        b[0].append(fv_to_attributes(fvs, cf if use_cf else None))
        b[1].append(np.zeros(len(fvs), dtype=int) if labels is None else np.asarray(labels, dtype=int))
        b[2].append(pos)
    out = []
    for (T, tod), (xs, ys, pos) in sorted(buckets.items()):
        X = sparse.csr_matrix(np.concatenate(xs))  # row n*T + t
        out.append((X, np.stack(ys), tod, np.array(pos)))
    return out


@dataclass
class CrfDataset:
    """Training sequences grouped by (length, time of day) for batched inference.

    Attribute matrices are sparse with one row per position, sequence-major.
    """

    use_cf: bool
    groups: list  # (X csr (N*T, A), Y (N, T) int, tod int, original positions)
    n_sequences: int

    @classmethod
    def from_sequences(cls, seqs: Sequence, use_cf: bool = False):
        """``seqs`` holds (fvs (T, 68), labels (T,), cf (T, 8) or None) triples."""
        seqs = list(seqs)
        return cls(use_cf, _bucket(seqs, use_cf), len(seqs))

    def __len__(self):
        return self.n_sequences


def _log_matmul(a, M):
    """log(exp(a) @ exp(M)) for a (N, L) and M (L, L), max-shifted per row and column."""
    ma = a.max(axis=1, keepdims=True)
    mc = M.max(axis=0, keepdims=True)
    prod = np.exp(a - ma) @ np.exp(M - mc)
    return ma + mc + np.log(np.maximum(prod, 1e-300))


def _forward_alpha(emit, trans):
    N, T, L = emit.shape
    alpha = np.empty((N, T, L))
    alpha[:, 0] = emit[:, 0]
    for t in range(1, T):
        alpha[:, t] = _log_matmul(alpha[:, t - 1], trans) + emit[:, t]
    return alpha


def _group_nll_grad(X, Y, trans, ws):
    """Batched NLL and raw gradients for sequences sharing length and transition matrix."""
    N, T = Y.shape
    A, L = ws.shape
    emit = np.asarray(X @ ws).reshape(N, T, L)
    alpha = _forward_alpha(emit, trans)
    beta = np.zeros((N, T, L))
    for t in range(T - 2, -1, -1):
        beta[:, t] = _log_matmul(emit[:, t + 1] + beta[:, t + 1], trans.T)
    logZ = _lse(alpha[:, -1], axis=1)
    node = np.exp(alpha + beta - logZ[:, None, None])

    rows = np.arange(N)
    gold = emit[rows[:, None], np.arange(T)[None, :], Y].sum(axis=1)
    if T > 1:
        gold += trans[Y[:, :-1], Y[:, 1:]].sum(axis=1)
    nll = float((logZ - gold).sum())

    Yhot = np.zeros((N, T, L))
    Yhot[rows[:, None], np.arange(T)[None, :], Y] = 1.0
    d_ws = np.asarray(X.T @ (node - Yhot).reshape(-1, L))

    d_tr = np.zeros((L, L))
    if T > 1:
        mT = trans.max()
        eT = np.exp(trans - mT)
        for t in range(1, T):
            a = alpha[:, t - 1]
            g = emit[:, t] + beta[:, t]
            am = a.max(axis=1, keepdims=True)
            gm = g.max(axis=1, keepdims=True)
            wn = np.exp(am + gm + mT - logZ[:, None])
            d_tr += eT * (np.exp(a - am).T @ (wn * np.exp(g - gm)))
            np.add.at(d_tr, (Y[:, t - 1], Y[:, t]), -1.0)
    return nll, d_ws, d_tr


def nll_and_gradient(w: np.ndarray, dataset: CrfDataset, config: CrfTrainConfig):
    """Penalized NLL (L2 part only) and its gradient; L1 is left to the optimizer."""
    if len(dataset) == 0:
        raise ValueError("empty CRF dataset")
    use_cf = dataset.use_cf
    ws, wt, wtt = split_weights(w, use_cf)
    g = np.zeros_like(w)
    gs, gt, gtt = split_weights(g, use_cf)
    total = 0.0
    for X, Y, tod, _ in dataset.groups:
        nll, d_ws, d_tr = _group_nll_grad(X, Y, wt + wtt[tod], ws)
        total += nll
        gs += d_ws
        gt += d_tr
        gtt[tod] += d_tr
    pm = penalty_mask(use_cf)
    total += config.l2 * float((pm * w) @ (pm * w))
    g += 2.0 * config.l2 * pm * w
    return total, g


def train_crf(dataset: CrfDataset, config: CrfTrainConfig | None = None, w0=None) -> CrfModel:
    config = config or CrfTrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty CRF dataset")
    use_cf = dataset.use_cf
    x0 = np.zeros(n_weights(use_cf)) if w0 is None else np.array(w0, dtype=float)
    res = lbfgs_minimize(
        lambda w: nll_and_gradient(w, dataset, config),
        x0,
        LbfgsConfig(memory=config.memory, max_iter=config.max_iter, gtol=config.gtol, ftol=config.ftol),
        l1=config.l1 * penalty_mask(use_cf),
    )
    log.info("CRF training: %s after %d iterations, objective %.4f", res.message, res.n_iter, res.f)
    return CrfModel(res.x, use_cf=use_cf, converged=res.converged, history=res.history)


def conversation_sequences(c: Conversation, window: int = 5, cf_rows=None, whole=False):
    """Training sequences of one conversation: windows ending at every turn.

    Features come from the training labels; targets use the promoted labels.
    ``cf_rows`` is (n+1, 8), row ``j-1`` being the CF scores before turn ``j``.
    """
    train = training_labels(c)
    target = promote_rejections(c, train)
    fvs = conversation_fvs(c.with_labels(train))
    y = np.array([LABEL_INDEX[lab] for lab in target])
    n = len(c)
    if whole:
        return [(fvs[:n], y, None if cf_rows is None else cf_rows[:n])]
    out = []
    for r in range(1, n + 1):
        lo = max(0, r - window)
        out.append((fvs[lo:r], y[lo:r], None if cf_rows is None else cf_rows[lo:r]))
    return out


def predict_next_topic(model: CrfModel, fvs_window: np.ndarray, cf_window=None):
    """8-way topic distribution at the last position of a feature window.

    The window ends at the position whose label is being predicted; topic
    scores are the Accept-label marginals there, renormalized.
    """
    _, node, _ = log_partition_and_marginals(model, fvs_window, cf_window)
    accept = node[-1, ACCEPT_SLICE]
    return accept, accept / accept.sum()


def predict_last_batch(model: CrfModel, seqs: Sequence) -> np.ndarray:
    """Last-position label marginals (N, 18) for many (fvs, None, cf) windows."""
    if not np.all(np.isfinite(model.weights)):
        raise FloatingPointError("NaN or infinite CRF weights")
    ws, wt, wtt = model.split()
    out = np.zeros((len(seqs), N_LABELS))
    for X, Y, tod, pos in _bucket(list(seqs), model.use_cf):
        N, T = Y.shape
        emit = np.asarray(X @ ws).reshape(N, T, N_LABELS)
        last = _forward_alpha(emit, wt + wtt[tod])[:, -1]
        out[pos] = np.exp(last - _lse(last, axis=1)[:, None])
    return out
