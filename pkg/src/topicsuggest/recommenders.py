"""Baseline recommenders: fixed popularity order, KNN collaborative filtering
and the window-based contextual CF.

User vector layout (16 entries)::

    [ 0: 8]  topic response per suggestible topic, in {-1, 0, +1}
    [8]      name given
    [9]      gender
    [10:14]  time of day, one-hot
    [14]     fraction of suggestions accepted so far
    [15]     fraction of suggestions rejected so far
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import (
    N_SUGGESTIBLE,
    SUGGESTIBLE,
    SUGGESTIBLE_INDEX,
    TIMES_OF_DAY,
    Conversation,
    LabelKind,
    Topic,
    frequency_order,
    training_labels,
)
from .features import extract_state_features, make_window
from .neuralnet.layers import Dense, relu_backward, relu_forward, softmax, softmax_ce
from .neuralnet.optim import AdamConfig, OptimState, adam_step

K_NEIGHBORS = 33
USER_DIM = 16
CCF_SLOT = N_SUGGESTIBLE


@dataclass(frozen=True)
class TopicScores:
    """Per-topic scores in SUGGESTIBLE order and their normalized distribution."""

    scores: np.ndarray
    distribution: np.ndarray

    @classmethod
    def from_distribution(cls, p) -> "TopicScores":
        p = np.asarray(p, dtype=float)
        return cls(p, p / p.sum())

    @classmethod
    def from_scores(cls, s) -> "TopicScores":
        s = np.asarray(s, dtype=float)
        return cls(s, softmax(s))

    def ranked(self) -> list[Topic]:
        """Topics by descending score; ties fall back to global frequency order."""
        freq_rank = {t: r for r, t in enumerate(frequency_order())}
        return sorted(SUGGESTIBLE, key=lambda t: (-self.distribution[SUGGESTIBLE_INDEX[t]], freq_rank[t]))

    def top(self) -> Topic:
        return self.ranked()[0]

    def as_dict(self) -> dict:
        return {t.name: float(self.distribution[k]) for k, t in enumerate(SUGGESTIBLE)}


def uniform_scores() -> TopicScores:
    return TopicScores(np.zeros(N_SUGGESTIBLE), np.full(N_SUGGESTIBLE, 1.0 / N_SUGGESTIBLE))


# ----------------------------------------------------------------------
# popularity

def popularity_order(time_of_day: str) -> list[Topic]:
    if time_of_day not in TIMES_OF_DAY:
        raise ValueError(f"unknown time of day {time_of_day!r}")
    third = {"Morning": Topic.Pets_Animal, "Day": Topic.Travel}.get(time_of_day, Topic.Games)
    order = [Topic.Movie, Topic.Music, third]
    return order + [t for t in frequency_order() if t not in order]


def popularity_suggest(time_of_day: str, already_suggested: Iterable[Topic] = ()) -> Topic:
    done = set(already_suggested)
    for t in popularity_order(time_of_day):
        if t not in done:
            return t
    raise ValueError("all suggestible topics were already suggested")


def popularity_scores(time_of_day: str, already_suggested: Iterable[Topic] = ()) -> TopicScores:
    """Rank-derived scores: the popularity pick gets the highest score."""
    done = set(already_suggested)
    order = [t for t in popularity_order(time_of_day) if t not in done]
    order += [t for t in popularity_order(time_of_day) if t in done]
    s = np.zeros(N_SUGGESTIBLE)
    for r, t in enumerate(order):
        s[SUGGESTIBLE_INDEX[t]] = float(N_SUGGESTIBLE - r)
    return TopicScores(s, s / s.sum())


# ----------------------------------------------------------------------
# user vectors

def _labels(c: Conversation):
    return c.labels() if c.labeled else training_labels(c)


def build_user_vector(c: Conversation, i: int) -> np.ndarray:
    """User vector from the conversation before turn ``i`` (``i`` may be len(c)+1)."""
    s = extract_state_features(c, i)
    n_acc = n_rej = 0
    for lab in _labels(c)[: i - 1]:
        n_acc += lab.kind is LabelKind.Accept
        n_rej += lab.kind is LabelKind.Reject
    n = n_acc + n_rej
    u = np.zeros(USER_DIM)
    u[:8] = s.topic_response
    u[8] = float(s.name_given)
    u[9] = float(s.gender)
    u[10 + TIMES_OF_DAY.index(s.time_of_day)] = 1.0
    if n:
        u[14] = n_acc / n
        u[15] = n_rej / n
    return u


def user_vectors(c: Conversation) -> np.ndarray:
    """Rows i-1 = build_user_vector(c, i) for i = 1..len(c)+1, in one pass."""
    return np.stack([build_user_vector(c, i) for i in range(1, len(c) + 2)])


# ----------------------------------------------------------------------
# KNN

@dataclass
class NeighborSet:
    ids: list
    sims: np.ndarray
    scores: np.ndarray  # (k, 8) neighbor topic scores

    def __len__(self):
        return len(self.ids)


@dataclass
class KnnIndex:
    """Training users: one row per training conversation, kept in id order."""

    ids: list
    vectors: np.ndarray  # (n, 16)
    scores: np.ndarray  # (n, 8)
    k: int = K_NEIGHBORS
    _norms: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        order = sorted(range(len(self.ids)), key=lambda r: self.ids[r])
        self.ids = [self.ids[r] for r in order]
        self.vectors = np.asarray(self.vectors, dtype=float).reshape(-1, USER_DIM)[order]
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1, N_SUGGESTIBLE)[order]
        self._norms = np.linalg.norm(self.vectors, axis=1)
        self._row = {uid: r for r, uid in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_conversations(cls, convs: Iterable[Conversation], k: int = K_NEIGHBORS) -> "KnnIndex":
        ids, vecs, scores = [], [], []
        for c in convs:
            u = build_user_vector(c, len(c) + 1)
            ids.append(c.conversation_id)
            vecs.append(u)
            scores.append(u[:8])
        return cls(ids, np.array(vecs), np.array(scores), k)

    def row_of(self, uid) -> Optional[int]:
        return self._row.get(uid)


def cosine_similarities(u: np.ndarray, vectors: np.ndarray, norms=None) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1) if norms is None else norms
    nu = float(np.linalg.norm(u))
    denom = norms * nu
    dots = vectors @ u
    out = np.zeros(len(vectors))
    ok = denom > 0
    out[ok] = dots[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def _select(sims: np.ndarray, k: int, exclude_row: Optional[int]) -> np.ndarray:
    # rounding keeps ties that differ only by float noise in id order
    key = np.round(sims, 12)
    if exclude_row is not None:
        key = key.copy()
        key[exclude_row] = -np.inf
    n_ok = len(key) - (exclude_row is not None)
    k = min(k, n_ok)
    if k <= 0:
        return np.zeros(0, dtype=int)
    if k < len(key):
        kth = np.partition(-key, k - 1)[k - 1]
        cand = np.flatnonzero(-key <= kth)
    else:
        cand = np.arange(len(key))
    cand = cand[np.isfinite(key[cand])]
    order = cand[np.lexsort((cand, -key[cand]))]
    return order[:k]


def knn_neighbors(u: np.ndarray, index: KnnIndex, k: Optional[int] = None, exclude: Optional[str] = None) -> NeighborSet:
    """Top-k training users by cosine similarity; ``exclude`` leaves one id out."""
    if len(index) == 0:
        raise ValueError("empty training population")
    k = index.k if k is None else k
    sims = cosine_similarities(np.asarray(u, dtype=float), index.vectors, index._norms)
    rows = _select(sims, k, None if exclude is None else index.row_of(exclude))
    return NeighborSet([index.ids[r] for r in rows], sims[rows], index.scores[rows])


def cf_predict(u: np.ndarray, n: NeighborSet) -> TopicScores:
    mass = float(n.sims.sum()) if len(n) else 0.0
    if mass <= 1e-12:
        return uniform_scores()
    return TopicScores.from_scores(n.sims @ n.scores / mass)


def cf_scores_batch(U: np.ndarray, index: KnnIndex, exclude: Optional[str] = None) -> np.ndarray:
    """Raw cf_predict scores for many query vectors, shape (n, 8)."""
    U = np.atleast_2d(U)
    out = np.zeros((len(U), N_SUGGESTIBLE))
    nq = np.linalg.norm(U, axis=1)
    dots = U @ index.vectors.T
    denom = nq[:, None] * index._norms[None, :]
    sims = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    sims = np.clip(sims, -1.0, 1.0)
    skip = None if exclude is None else index.row_of(exclude)
    for q in range(len(U)):
        rows = _select(sims[q], index.k, skip)
        s = sims[q, rows]
        mass = s.sum()
        if mass > 1e-12:
            out[q] = s @ index.scores[rows] / mass
    return out


def conversation_cf_scores(c: Conversation, index: KnnIndex, exclude_self: bool = False) -> np.ndarray:
    """cf_predict scores before every turn: row i-1 for turn i, shape (n+1, 8)."""
    return cf_scores_batch(user_vectors(c), index, c.conversation_id if exclude_self else None)


# ----------------------------------------------------------------------
# softmax heads

@dataclass
class HeadConfig:
    hidden: int = 0
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)


class SoftmaxHead:
    """Dense (optionally dense-ReLU-dense) classifier over 8 topics."""

    def __init__(self, n_in: int, hidden: int = 0, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.n_in = n_in
        self.hidden = hidden
        if hidden:
            self.layers = [Dense(n_in, hidden, rng), Dense(hidden, N_SUGGESTIBLE, rng)]
        else:
            self.layers = [Dense(n_in, N_SUGGESTIBLE, rng)]
        self.trained = False
        self.losses: list = []

    @property
    def params(self) -> dict:
        return {f"l{j}.{k}": v for j, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def zero(self):
        for layer in self.layers:
            for v in layer.params.values():
                v[...] = 0.0
        self.trained = True
        return self

    def _forward(self, X):
        caches = []
        h = X
        for j, layer in enumerate(self.layers):
            h, c = layer.forward(h)
            r = None
            if j < len(self.layers) - 1:
                h, r = relu_forward(h)
            caches.append((c, r))
        return h, caches

    def _backward(self, d, caches):
        grads = {}
        for j in reversed(range(len(self.layers))):
            c, r = caches[j]
            if r is not None:
                d = relu_backward(d, r)
            d, g = self.layers[j].backward(d, c)
            grads.update({f"l{j}.{k}": v for k, v in g.items()})
        return grads

    def fit(self, X: np.ndarray, y: np.ndarray, config: HeadConfig | None = None) -> "SoftmaxHead":
        config = config or HeadConfig()
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=int)
        if len(X) == 0:
            raise ValueError("empty training set")
        rng = np.random.default_rng(config.seed)
        state = OptimState(config.adam)
        params = self.params
        for _ in range(config.epochs):
            order = rng.permutation(len(X))
            total = 0.0
            for lo in range(0, len(X), config.batch_size):
                b = order[lo: lo + config.batch_size]
                logits, caches = self._forward(X[b])
                loss, d = softmax_ce(logits, y[b])
                adam_step(params, self._backward(d, caches), state)
                total += loss * len(b)
            self.losses.append(total / len(X))
        self.trained = True
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if not self.trained:
            raise RuntimeError("head is not trained")
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        logits, _ = self._forward(np.atleast_2d(X))
        p = softmax(logits)
        return p[0] if single else p

    def state(self) -> dict:
        return dict(self.params)

    def load_state(self, arrays: dict):
        for name, arr in self.params.items():
            arr[...] = arrays[name]
        self.trained = True
        return self


def cf_head_train(scores: np.ndarray, targets: np.ndarray, config: HeadConfig | None = None) -> SoftmaxHead:
    config = config or HeadConfig()
    return SoftmaxHead(N_SUGGESTIBLE, 0, config.seed).fit(scores, targets, config)


def cf_head_predict(head: SoftmaxHead, scores) -> np.ndarray:
    s = scores.scores if isinstance(scores, TopicScores) else scores
    return head.predict_proba(s)


# ----------------------------------------------------------------------
# contextual CF

def ccf_from_scores(cf_rows: np.ndarray, i: int, m: int = 5) -> np.ndarray:
    """CCF vector for the window ending at turn ``i`` from precomputed CF scores.

    ``cf_rows[j]`` holds the CF scores once turn ``j`` is over (row 0 is the
    empty history), so window slot j uses ``cf_rows[j]``.
    """
    out = np.zeros(m * CCF_SLOT)
    for s, j in enumerate(range(i - m + 1, i + 1)):
        if j >= 1:
            out[s * CCF_SLOT + int(np.argmax(cf_rows[j]))] = 1.0
    return out


def contextual_cf_features(c: Conversation, i: int, index: KnnIndex, m: int = 5,
                           exclude: Optional[str] = None) -> np.ndarray:
    """Concatenated one-hot CF argmax per window slot; padded slots stay zero."""
    window = make_window(c, i, m)
    out = np.zeros(m * CCF_SLOT)
    for s, view in enumerate(window.turns):
        if view.pad:
            continue
        u = build_user_vector(c, view.index + 1)
        pred = cf_predict(u, knn_neighbors(u, index, exclude=exclude))
        out[s * CCF_SLOT + int(np.argmax(pred.scores))] = 1.0
    return out


def contextual_cf_train(X: np.ndarray, y: np.ndarray, config: HeadConfig | None = None) -> SoftmaxHead:
    config = config or HeadConfig(hidden=256)
    return SoftmaxHead(X.shape[1], config.hidden or 256, config.seed).fit(X, y, config)


def contextual_cf_predict(head: SoftmaxHead, ccf: np.ndarray) -> np.ndarray:
    return head.predict_proba(ccf)
