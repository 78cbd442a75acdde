"""The full suggestion models and the shared machinery to train and query them.

A *suggestion point* ``i`` is the moment after user turn ``i`` when the
system picks the topic to suggest; the user's reaction lands on turn
``i + 1``. Every model maps the conversation up to turn ``i`` to a
distribution over the eight suggestible topics.

Neural variants run an utterance encoder (CNN or BiLSTM with attention) on
each of the last ``m`` user turns, append the dialogue state after that turn
and, for hybrids, the CF topic distribution, and feed the ``m`` slots to a
window LSTM with a dense softmax head.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import crf
from .corpus import (
    N_SUGGESTIBLE,
    SUGGESTIBLE,
    SUGGESTIBLE_INDEX,
    Conversation,
    Corpus,
    LabelKind,
    Topic,
    Turn,
    promote_rejections,
    suggestion_events,
    training_labels,
)
from .features import FV_DIM, FV_LAYOUT_VERSION, PROFILE, TOPICAL, conversation_fvs
from .neuralnet.encoders import CnnEncoder, EmbeddingTable, RnnEncoder, Vocabulary, WindowAggregator, batch_ids
from .neuralnet.layers import softmax, softmax_ce
from .neuralnet.optim import AdamConfig, OptimState, adam_step
from .recommenders import (
    HeadConfig,
    KnnIndex,
    SoftmaxHead,
    TopicScores,
    ccf_from_scores,
    conversation_cf_scores,
    popularity_scores,
)

log = logging.getLogger(__name__)

VARIANTS = (
    "popularity",
    "cf",
    "contextual-cf",
    "cts-crf",
    "cts-cnn",
    "cts-rnn",
    "cts-crf-cf",
    "cts-cnn-cf",
    "cts-rnn-cf",
    "oracle",  # reads the reaction turn; an evaluation ceiling, not a model
)
HYBRIDS = ("cts-crf-cf", "cts-cnn-cf", "cts-rnn-cf")
NEEDS_CF = HYBRIDS + ("cf", "contextual-cf")


class ModelError(ValueError):
    pass


@dataclass
class NeuralConfig:
    emb_dim: int = 300
    n_filters: int = 128
    widths: tuple = (1, 2, 3)
    cnn_layers: int = 3
    rnn_hidden: int = 256
    att_dim: int = 0  # 0: same as the BiLSTM output
    lstm_hidden: int = 100
    dense: int = 256
    dropout: float = 0.5
    batch_size: int = 64
    max_epochs: int = 15
    patience: int = 3
    val_fraction: float = 0.1
    embedding_path: Optional[str] = None
    adam: AdamConfig = field(default_factory=AdamConfig)


@dataclass
class ModelConfig:
    variant: str = "cts-crf"
    window: int = 5
    text: bool = True
    topical: bool = True
    profile: bool = True
    k_neighbors: int = 33
    all_turns: bool = False
    seed: int = 0
    neural: NeuralConfig = field(default_factory=NeuralConfig)
    crf: crf.CrfTrainConfig = field(default_factory=crf.CrfTrainConfig)
    cf_head: HeadConfig = field(default_factory=lambda: HeadConfig(hidden=0, epochs=30))
    ccf_head: HeadConfig = field(default_factory=lambda: HeadConfig(hidden=256, epochs=20))

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.window < 1:
            raise ModelError("window must be at least 1")

    @property
    def uses_cf(self) -> bool:
        return self.variant in NEEDS_CF

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["neural"]["widths"] = list(d["neural"]["widths"])
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def fv_mask(config: ModelConfig) -> np.ndarray:
    """1 on the feature-vector coordinates the config's feature groups switch on."""
    mask = np.zeros(FV_DIM)
    if config.topical:
        mask[TOPICAL] = 1.0
    if config.profile:
        mask[PROFILE] = 1.0
    return mask


# ----------------------------------------------------------------------
# per-conversation caches and suggestion points

@dataclass
class Prepared:
    """Everything the models read from one conversation, computed once."""

    conversation: Conversation  # training-labeled
    fvs: np.ndarray  # (n+1, 68): row j = state before turn j+1
    cf: Optional[np.ndarray] = None  # (n+1, 8) raw CF scores, same row convention
    tokens: list = field(default_factory=list)
    suggested: list = field(default_factory=list)  # suggested[i] = topics suggested before turn i+1


def prepare(c: Conversation, index: Optional[KnnIndex] = None, exclude_self: bool = False) -> Prepared:
    labeled = c if c.labeled else c.with_labels(training_labels(c))
    suggested, seen = [], set()
    for k, lab in enumerate(labeled.labels()):
        suggested.append(frozenset(seen))
        if lab.is_event:
            seen.add(lab.topic)
    suggested.append(frozenset(seen))
    return Prepared(
        conversation=labeled,
        fvs=conversation_fvs(labeled),
        cf=None if index is None else conversation_cf_scores(labeled, index, exclude_self),
        tokens=[t.tokens for t in labeled.turns],
        suggested=suggested,
    )


@dataclass
class Point:
    prep: Prepared
    i: int  # suggestion point: turns 1..i are visible
    target: int = -1  # SUGGESTIBLE index of the accepted topic, -1 when unknown
    ordinal: int = 0


def training_points(convs: Sequence[Conversation], index=None, all_turns=False) -> list[Point]:
    """One point per accepted suggestion (after promotion); CF scores leave the own row out."""
    points = []
    for c in convs:
        prep = None
        for e in suggestion_events(c):
            if not e.accepted:
                continue
            prep = prep or prepare(c, index, exclude_self=True)
            points.append(Point(prep, e.turn - 1, SUGGESTIBLE_INDEX[e.topic], e.ordinal))
        if all_turns:
            prep = prep or prepare(c, index, exclude_self=True)
            labels = prep.conversation.labels()
            for k, turn in enumerate(c.turns[1:], start=2):
                if turn.topic in SUGGESTIBLE_INDEX and not labels[k - 1].is_event:
                    points.append(Point(prep, k - 1, SUGGESTIBLE_INDEX[turn.topic], 0))
    return points


def test_points(convs: Sequence[Conversation], index=None) -> list[Point]:
    points = []
    for c in convs:
        prep = None
        for e in suggestion_events(c):
            if e.accepted:
                prep = prep or prepare(c, index)
                points.append(Point(prep, e.turn - 1, SUGGESTIBLE_INDEX[e.topic], e.ordinal))
    return points


# ----------------------------------------------------------------------
# neural model

class NeuralModel:
    def __init__(self, kind: str, vocab: Vocabulary, config: ModelConfig, hybrid: bool):
        nc = config.neural
        rng = np.random.default_rng(config.seed)
        self.kind = kind
        self.vocab = vocab
        self.config = config
        self.hybrid = hybrid
        self.encoder = None
        enc_dim = 0
        if config.text:
            if nc.embedding_path:
                table = EmbeddingTable.from_text(vocab, nc.embedding_path, nc.emb_dim, config.seed)
            else:
                table = EmbeddingTable.random(vocab, nc.emb_dim, config.seed)
            if kind == "cnn":
                self.encoder = CnnEncoder(len(vocab), nc.emb_dim, nc.n_filters, tuple(nc.widths), nc.cnn_layers, rng,
                                          embedding=table.layer)
            else:
                self.encoder = RnnEncoder(len(vocab), nc.emb_dim, nc.rnn_hidden, nc.att_dim or None, rng,
                                          embedding=table.layer)
            enc_dim = self.encoder.n_out
        self.enc_dim = enc_dim
        self.slot_dim = enc_dim + FV_DIM + N_SUGGESTIBLE
        self.aggregator = WindowAggregator(self.slot_dim, nc.lstm_hidden, nc.dense, N_SUGGESTIBLE, nc.dropout, rng)
        self.fv_mask = fv_mask(config)

    @property
    def params(self) -> dict:
        out = {f"agg.{k}": v for k, v in self.aggregator.params.items()}
        if self.encoder is not None:
            out.update({f"enc.{k}": v for k, v in self.encoder.params.items()})
        return out

    def _inputs(self, points: Sequence[Point]):
        m = self.config.window
        B = len(points)
        reps = np.zeros((B, m, self.slot_dim))
        utts, where = [], []
        for b, pt in enumerate(points):
            for s, j in enumerate(range(pt.i - m + 1, pt.i + 1)):
                if j < 1:
                    continue
                reps[b, s, self.enc_dim: self.enc_dim + FV_DIM] = pt.prep.fvs[j] * self.fv_mask
                if self.hybrid:
                    reps[b, s, self.enc_dim + FV_DIM:] = softmax(pt.prep.cf[j])
                utts.append(pt.prep.tokens[j - 1])
                where.append((b, s))
        return reps, utts, where

    def forward(self, points, train=False, rng=None):
        reps, utts, where = self._inputs(points)
        enc_cache = None
        if self.encoder is not None and utts:
            ids, mask = batch_ids(self.vocab, utts)
            y, enc_cache = self.encoder.forward(ids, mask)
            bi = np.array([w[0] for w in where])
            si = np.array([w[1] for w in where])
            reps[bi, si, : self.enc_dim] = y
        logits, agg_cache = self.aggregator.forward(reps, train=train, rng=rng)
        return logits, (agg_cache, enc_cache, where)

    def backward(self, dlogits, cache):
        agg_cache, enc_cache, where = cache
        dreps, g = self.aggregator.backward(dlogits, agg_cache)
        grads = {f"agg.{k}": v for k, v in g.items()}
        if self.encoder is not None:
            if enc_cache is not None:
                bi = np.array([w[0] for w in where])
                si = np.array([w[1] for w in where])
                _, ge = self.encoder.backward(dreps[bi, si, : self.enc_dim], enc_cache)
            else:
                ge = self.encoder.zero_grads()
            grads.update({f"enc.{k}": v for k, v in ge.items()})
        return grads

    def predict(self, points, batch=256) -> np.ndarray:
        out = []
        for lo in range(0, len(points), batch):
            logits, _ = self.forward(points[lo: lo + batch])
            out.append(softmax(logits))
        return np.concatenate(out) if out else np.zeros((0, N_SUGGESTIBLE))


def build_vocab(points: Sequence[Point], window: int) -> Vocabulary:
    seen = set()
    for pt in points:
        for j in range(max(1, pt.i - window + 1), pt.i + 1):
            seen.update(pt.prep.tokens[j - 1])
    return Vocabulary(sorted(seen))


def _split_validation(points, fraction, seed):
    ids = sorted({pt.prep.conversation.conversation_id for pt in points})
    rng = np.random.default_rng([seed, 7])
    n_val = int(round(fraction * len(ids))) if len(ids) > 1 else 0
    val_ids = set(rng.permutation(ids)[:n_val].tolist()) if n_val else set()
    train = [pt for pt in points if pt.prep.conversation.conversation_id not in val_ids]
    val = [pt for pt in points if pt.prep.conversation.conversation_id in val_ids]
    return train, val


def train_neural(model: NeuralModel, points: Sequence[Point]) -> list[dict]:
    """Mini-batch Adam with early stopping on held-out conversations; returns the epoch log."""
    nc = model.config.neural
    if not points:
        raise ModelError("no training examples")
    train, val = _split_validation(points, nc.val_fraction, model.config.seed)
    rng = np.random.default_rng([model.config.seed, 11])
    y_train = np.array([pt.target for pt in train])
    state = OptimState(nc.adam)
    params = model.params
    best = (-1.0, None)
    history, stale = [], 0
    for epoch in range(1, nc.max_epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for lo in range(0, len(train), nc.batch_size):
            b = order[lo: lo + nc.batch_size]
            logits, cache = model.forward([train[k] for k in b], train=True, rng=rng)
            loss, d = softmax_ce(logits, y_train[b])
            adam_step(params, model.backward(d, cache), state)
            total += loss * len(b)
        entry = {"epoch": epoch, "train_loss": total / len(train)}
        if val:
            p = model.predict(val)
            entry["val_accuracy"] = float(np.mean(p.argmax(axis=1) == np.array([pt.target for pt in val])))
            score = entry["val_accuracy"]
        else:
            score = -entry["train_loss"]
        history.append(entry)
        log.info("epoch %d: %s", epoch, entry)
        if score > best[0] or best[1] is None:
            best = (score, {k: v.copy() for k, v in params.items()})
            stale = 0
        else:
            stale += 1
            if stale >= nc.patience:
                break
    for k, v in best[1].items():
        params[k][...] = v
    return history


# ----------------------------------------------------------------------
# the trained model container

@dataclass
class TrainedModel:
    config: ModelConfig
    knn: Optional[KnnIndex] = None
    crf_model: Optional[crf.CrfModel] = None
    neural: Optional[NeuralModel] = None
    head: Optional[SoftmaxHead] = None
    history: list = field(default_factory=list)
    corpus_digest: str = ""

    @property
    def variant(self) -> str:
        return self.config.variant

    def scores(self, points: Sequence[Point]) -> np.ndarray:
        """(N, 8) topic distributions for suggestion points."""
        return score_points(self, points)


def _crf_window(pt: Point, window: int, use_cf: bool, mask):
    lo = max(1, pt.i + 2 - window)
    rows = slice(lo - 1, pt.i + 1)  # positions lo..i+1, fv row = position - 1
    return pt.prep.fvs[rows] * mask, None, (pt.prep.cf[rows] if use_cf else None)


def crf_sequences(convs, window, use_cf, index=None, whole=False, mask=None):
    seqs = []
    for c in convs:
        cf_rows = conversation_cf_scores(c, index, exclude_self=True) if use_cf else None
        for fvs, y, cf in crf.conversation_sequences(c, window, cf_rows, whole):
            seqs.append((fvs if mask is None else fvs * mask, y, cf))
    return seqs


def score_points(model: TrainedModel, points: Sequence[Point]) -> np.ndarray:
    v = model.variant
    cfg = model.config
    if not points:
        return np.zeros((0, N_SUGGESTIBLE))
    if v == "popularity":
        return np.stack([
            popularity_scores(pt.prep.conversation.time_of_day, pt.prep.suggested[pt.i]).distribution
            for pt in points
        ])
    if v == "oracle":
        out = np.full((len(points), N_SUGGESTIBLE), 0.0)
        for n, pt in enumerate(points):
            turns = pt.prep.conversation.turns
            pst = turns[pt.i].previous_suggested_topic if pt.i < len(turns) else None
            if pst is None:
                out[n] = 1.0 / N_SUGGESTIBLE
            else:
                out[n, SUGGESTIBLE_INDEX[pst]] = 1.0
        return out
    if v in ("cts-crf", "cts-crf-cf"):
        use_cf = v == "cts-crf-cf"
        mask = fv_mask(cfg)
        marg = crf.predict_last_batch(model.crf_model, [_crf_window(pt, cfg.crf.window, use_cf, mask) for pt in points])
        acc = marg[:, crf.ACCEPT_SLICE]
        return acc / acc.sum(axis=1, keepdims=True)
    if v == "cf":
        return model.head.predict_proba(np.stack([pt.prep.cf[pt.i] for pt in points]))
    if v == "contextual-cf":
        return model.head.predict_proba(np.stack([ccf_from_scores(pt.prep.cf, pt.i, cfg.window) for pt in points]))
    return model.neural.predict(list(points))


class TrainingData:
    """A training corpus plus lazily built artifacts shared by every variant.

    The KNN index, the suggestion points and the CRF sequences depend only
    on the corpus and ``k``, so experiments that train several variants
    compute them once.
    """

    def __init__(self, corpus: Corpus | Sequence[Conversation], k_neighbors: int = 33):
        if getattr(corpus, "split", None) == "test":
            raise ModelError("refusing to train on a corpus tagged as the test split")
        self.conversations = list(corpus)
        if not self.conversations:
            raise ModelError("empty training corpus")
        self.digest = corpus.digest() if isinstance(corpus, Corpus) else Corpus(tuple(self.conversations)).digest()
        self.k = k_neighbors
        self._knn = None
        self._points: dict = {}
        self._seqs: dict = {}

    @property
    def knn(self) -> KnnIndex:
        if self._knn is None:
            self._knn = KnnIndex.from_conversations(self.conversations, self.k)
        return self._knn

    def points(self, with_cf: bool, all_turns: bool = False) -> list[Point]:
        key = (with_cf, all_turns)
        if key not in self._points:
            if with_cf and (False, all_turns) in self._points:
                pts = self._points[(False, all_turns)]
                cf = {}
                for pt in pts:
                    cid = pt.prep.conversation.conversation_id
                    if cid not in cf:
                        cf[cid] = dataclasses.replace(
                            pt.prep, cf=conversation_cf_scores(pt.prep.conversation, self.knn, exclude_self=True))
                self._points[key] = [dataclasses.replace(pt, prep=cf[pt.prep.conversation.conversation_id]) for pt in pts]
            else:
                self._points[key] = training_points(self.conversations, self.knn if with_cf else None, all_turns)
        return self._points[key]

    def crf_sequences(self, use_cf: bool, window: int, whole: bool, mask=None):
        key = (use_cf, window, whole, None if mask is None else mask.tobytes())
        if key not in self._seqs:
            self._seqs[key] = crf_sequences(self.conversations, window, use_cf, self.knn if use_cf else None, whole,
                                            mask)
        return self._seqs[key]


def train(config: ModelConfig, data: "TrainingData | Corpus | Sequence[Conversation]") -> TrainedModel:
    """Train ``config.variant`` on the training conversations."""
    if not isinstance(data, TrainingData):
        data = TrainingData(data, config.k_neighbors)
    elif data.k != config.k_neighbors:
        raise ModelError("training data was prepared for a different neighbourhood size")
    model = TrainedModel(config, corpus_digest=data.digest)
    v = config.variant
    if v in ("popularity", "oracle"):
        return model
    if config.uses_cf:
        model.knn = data.knn
    if v in ("cts-crf", "cts-crf-cf"):
        use_cf = v == "cts-crf-cf"
        seqs = data.crf_sequences(use_cf, config.crf.window, config.crf.whole_conversations, fv_mask(config))
        model.crf_model = crf.train_crf(crf.CrfDataset.from_sequences(seqs, use_cf), config.crf)
        model.history = [{"iteration": k, "objective": f} for k, f in enumerate(model.crf_model.history)]
        return model
    points = data.points(config.uses_cf, config.all_turns)
    if not points:
        raise ModelError("no accepted suggestions in the training corpus")
    y = np.array([pt.target for pt in points])
    if v == "cf":
        X = np.stack([pt.prep.cf[pt.i] for pt in points])
        hc = dataclasses.replace(config.cf_head, seed=config.seed)
        model.head = SoftmaxHead(N_SUGGESTIBLE, hc.hidden, hc.seed).fit(X, y, hc)
        model.history = [{"epoch": k + 1, "train_loss": l} for k, l in enumerate(model.head.losses)]
        return model
    if v == "contextual-cf":
        X = np.stack([ccf_from_scores(pt.prep.cf, pt.i, config.window) for pt in points])
        hc = dataclasses.replace(config.ccf_head, seed=config.seed)
        model.head = SoftmaxHead(X.shape[1], hc.hidden or 256, hc.seed).fit(X, y, hc)
        model.history = [{"epoch": k + 1, "train_loss": l} for k, l in enumerate(model.head.losses)]
        return model
    kind = "cnn" if "cnn" in v else "rnn"
    vocab = build_vocab(points, config.window)
    model.neural = NeuralModel(kind, vocab, config, hybrid=v in HYBRIDS)
    model.history = train_neural(model.neural, points)
    return model


def zero_model(config: ModelConfig, vocab: Optional[Vocabulary] = None) -> TrainedModel:
    """A variant with every trainable parameter at zero (uniform predictions)."""
    model = TrainedModel(config)
    v = config.variant
    if v in ("cts-crf", "cts-crf-cf"):
        model.crf_model = crf.CrfModel.zeros(v == "cts-crf-cf")
    elif v in ("cf", "contextual-cf"):
        n_in = N_SUGGESTIBLE if v == "cf" else N_SUGGESTIBLE * config.window
        model.head = SoftmaxHead(n_in, 0 if v == "cf" else 256).zero()
    elif v not in ("popularity", "oracle"):
        kind = "cnn" if "cnn" in v else "rnn"
        model.neural = NeuralModel(kind, vocab or Vocabulary(), config, hybrid=v in HYBRIDS)
        for arr in model.neural.params.values():
            arr[...] = 0.0
    if config.uses_cf:
        model.knn = KnnIndex([], np.zeros((0, 16)), np.zeros((0, 8)), config.k_neighbors)
    return model


# ----------------------------------------------------------------------
# single-point queries and serving

def _prepare_for(model: TrainedModel, c: Conversation) -> Prepared:
    index = model.knn if model.config.uses_cf else None
    if index is not None and len(index) == 0:
        prep = prepare(c)
        prep.cf = np.zeros((len(c) + 1, N_SUGGESTIBLE))
        return prep
    return prepare(c, index)


def forward(model: TrainedModel, c: Conversation, i: int) -> TopicScores:
    """Topic distribution for the suggestion made after user turn ``i`` (0 = before any turn)."""
    if not 0 <= i <= len(c):
        raise IndexError(f"suggestion point {i} out of range")
    dist = score_points(model, [Point(_prepare_for(model, c), i)])[0]
    return TopicScores.from_distribution(dist)


@dataclass
class Session:
    """A live conversation built turn by turn."""

    time_of_day: str = "Evening"
    gender: int = 0
    name_given: bool = False
    turns: list = field(default_factory=list)
    last_suggested: Optional[Topic] = None
    conversation_id: str = "live"

    def conversation(self) -> Conversation:
        return Conversation(self.conversation_id, "live-user", dt.date(2018, 8, 1), self.time_of_day,
                            self.name_given, self.gender, tuple(self.turns), partial=True)

    def add_user_turn(self, utterance: str, topic: Topic, system_response: str = ""):
        prev = self.turns[-1].topic if self.turns else None
        self.turns.append(Turn(len(self.turns) + 1, utterance, system_response, topic, prev, self.last_suggested))

    def rejected(self) -> set:
        """Topics declined so far and not taken up by the user afterwards."""
        c = self.conversation()
        labels = promote_rejections(c, training_labels(c)) if self.turns else []
        return {lab.topic for lab in labels if lab.kind is LabelKind.Reject}

    def accepted(self) -> set:
        c = self.conversation()
        labels = training_labels(c) if self.turns else []
        return {lab.topic for lab in labels if lab.kind is LabelKind.Accept}


def suggest(model: TrainedModel, session: Session) -> list[tuple[Topic, float]]:
    """Full ranking with this session's rejected topics moved to the bottom."""
    scores = forward(model, session.conversation(), len(session.turns))
    ranked = scores.ranked()
    rejected = session.rejected()
    ranked = [t for t in ranked if t not in rejected] + [t for t in ranked if t in rejected]
    return [(t, float(scores.distribution[SUGGESTIBLE_INDEX[t]])) for t in ranked]


__all__ = [
    "VARIANTS", "ModelConfig", "NeuralConfig", "TrainedModel", "train", "forward", "suggest", "Session",
    "score_points", "training_points", "test_points", "prepare", "Point", "zero_model", "TrainingData",
]
