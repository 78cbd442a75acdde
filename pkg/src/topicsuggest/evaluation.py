"""Offline evaluation: accuracy tables, suggestion-index curves, acceptance
rates and the feature/context ablation grid.

Ground truth is the accepted topic at each suggestion reaction (after
rejected suggestions are promoted when the user later raises the topic).
A prediction is the top-ranked topic of the model at that point; ties are
broken by global topic frequency, the same rule used at serving time.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .corpus import N_SUGGESTIBLE, SUGGESTIBLE, SUGGESTIBLE_INDEX, Conversation, Corpus, LabelKind, frequency_order
from .corpus import training_labels
from .models import HYBRIDS, ModelConfig, TrainedModel, TrainingData, score_points, test_points, train

log = logging.getLogger(__name__)

REPORT_SCHEMA = "eval-report-1"
GRID_SCHEMA = "ablation-grid-1"
FEATURE_GROUPS = ("none", "topical", "user-profile", "all", "+cf")
CONTEXT_SIZES = (1, 3, 5)


class EvalError(ValueError):
    pass


# ----------------------------------------------------------------------
# predictions and metrics

_FREQ_RANK = np.array([frequency_order().index(t) for t in SUGGESTIBLE])


def top_topics(dist: np.ndarray) -> np.ndarray:
    """Row-wise argmax over the 8 topics; exact ties go to the more frequent topic."""
    dist = np.asarray(dist)
    tied = dist == dist.max(axis=1, keepdims=True)
    return np.where(tied, _FREQ_RANK, N_SUGGESTIBLE).argmin(axis=1)


def macro_from(correct: np.ndarray, target: np.ndarray) -> float:
    """Unweighted mean of per-topic accuracies over topics that have events."""
    accs = [correct[target == k].mean() for k in range(N_SUGGESTIBLE) if np.any(target == k)]
    return float(np.mean(accs))


@dataclass
class EvalReport:
    micro_accuracy: float
    macro_accuracy: float
    n_events: int
    per_topic: dict  # topic name -> {"n_events", "accuracy"}; accuracy None when no events
    by_suggestion_index: list  # [{"index", "n_events", "accuracy"}]
    acceptance_rate: dict  # topic name -> rate
    excluded_topics: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, pred, target, ordinals, acceptance_rate=None, metadata=None) -> "EvalReport":
        pred, target, ordinals = (np.asarray(a, dtype=int) for a in (pred, target, ordinals))
        if len(target) == 0:
            raise EvalError("no scorable suggestion events in the evaluation corpus")
        correct = pred == target
        per_topic, excluded = {}, []
        for k, t in enumerate(SUGGESTIBLE):
            sel = target == k
            n = int(sel.sum())
            per_topic[t.name] = {"n_events": n, "accuracy": float(correct[sel].mean()) if n else None}
            if not n:
                excluded.append(t.name)
        curve = [
            {"index": int(k), "n_events": int((ordinals == k).sum()), "accuracy": float(correct[ordinals == k].mean())}
            for k in np.unique(ordinals)
        ]
        return cls(
            micro_accuracy=float(correct.mean()),
            macro_accuracy=macro_from(correct, target),
            n_events=int(len(target)),
            per_topic=per_topic,
            by_suggestion_index=curve,
            acceptance_rate=dict(acceptance_rate or {}),
            excluded_topics=excluded,
            metadata=dict(metadata or {}),
        )

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "metadata": self.metadata,
            "micro_accuracy": self.micro_accuracy,
            "macro_accuracy": self.macro_accuracy,
            "n_events": self.n_events,
            "per_topic": self.per_topic,
            "excluded_topics": self.excluded_topics,
            "by_suggestion_index": self.by_suggestion_index,
            "acceptance_rate": self.acceptance_rate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        name = self.metadata.get("variant", "model")
        return comparison_table({name: self})

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "n_events", "accuracy"])
        for row in self.by_suggestion_index:
            w.writerow([row["index"], row["n_events"], f"{row['accuracy']:.6f}"])
        return buf.getvalue()

    def acceptance_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["topic", "acceptance_rate"])
        for t, r in self.acceptance_rate.items():
            w.writerow([t, f"{r:.6f}"])
        return buf.getvalue()


def comparison_table(reports: dict) -> str:
    """Per-topic accuracy table with one column per named report."""
    names = list(reports)
    width = max(12, *(len(n) + 2 for n in names))
    lines = ["Topic".ljust(24) + "".join(n.rjust(width) for n in names)]

    def fmt(v):
        return ("-" if v is None else f"{v:.3f}").rjust(width)

    for t in SUGGESTIBLE:
        lines.append(t.name.ljust(24) + "".join(fmt(reports[n].per_topic[t.name]["accuracy"]) for n in names))
    lines.append("Micro".ljust(24) + "".join(fmt(reports[n].micro_accuracy) for n in names))
    lines.append("Macro".ljust(24) + "".join(fmt(reports[n].macro_accuracy) for n in names))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# corpus-level statistics

def acceptance_rate_by_topic(corpus: Sequence[Conversation]) -> dict:
    """accepts / (accepts + rejects) per topic, from the users' immediate reactions.

    Topics that were never suggested are omitted. Keys follow the suggestible
    topic order.
    """
    acc = np.zeros(N_SUGGESTIBLE)
    tot = np.zeros(N_SUGGESTIBLE)
    for c in corpus:
        labels = c.labels() if c.labeled else training_labels(c)
        for lab in labels:
            if not lab.is_event or lab.topic not in SUGGESTIBLE_INDEX:
                continue
            k = SUGGESTIBLE_INDEX[lab.topic]
            tot[k] += 1
            acc[k] += lab.kind is LabelKind.Accept
    return {t.name: float(acc[k] / tot[k]) for k, t in enumerate(SUGGESTIBLE) if tot[k]}


def _corpus_digest(corpus) -> str:
    if isinstance(corpus, Corpus):
        return corpus.digest()
    return Corpus(tuple(corpus)).digest()


def predict_events(model: TrainedModel, corpus: Sequence[Conversation]):
    """(predicted, target, ordinal) index arrays over every Accept event."""
    points = test_points(list(corpus), model.knn if model.config.uses_cf else None)
    if not points:
        raise EvalError("no scorable suggestion events in the evaluation corpus")
    pred = top_topics(score_points(model, points))
    target = np.array([pt.target for pt in points])
    ordinals = np.array([pt.ordinal for pt in points])
    return pred, target, ordinals


def evaluate(model: TrainedModel, corpus: Sequence[Conversation]) -> EvalReport:
    pred, target, ordinals = predict_events(model, corpus)
    meta = {
        "variant": model.variant,
        "seed": model.config.seed,
        "config_hash": model.config.digest(),
        "train_corpus_hash": model.corpus_digest,
        "test_corpus_hash": _corpus_digest(corpus),
    }
    return EvalReport.from_predictions(pred, target, ordinals, acceptance_rate_by_topic(corpus), meta)


def accuracy_by_suggestion_index(model: TrainedModel, corpus: Sequence[Conversation]) -> list:
    pred, target, ordinals = predict_events(model, corpus)
    return EvalReport.from_predictions(pred, target, ordinals).by_suggestion_index


# ----------------------------------------------------------------------
# significance

def paired_bootstrap(correct_a, correct_b, target, n_resamples: int = 10_000, seed: int = 0,
                     chunk: int = 500) -> float:
    """One-sided p-value that system A's macro accuracy is not above B's.

    Events are resampled with replacement, both systems on the same draw;
    the p-value is the fraction of draws where macro(A) - macro(B) <= 0.
    """
    a = np.asarray(correct_a, dtype=float)
    b = np.asarray(correct_b, dtype=float)
    y = np.asarray(target, dtype=int)
    n = len(y)
    rng = np.random.default_rng(seed)
    worse = 0
    done = 0
    while done < n_resamples:
        c = min(chunk, n_resamples - done)
        idx = rng.integers(0, n, size=(c, n))
        flat = (y[idx] + N_SUGGESTIBLE * np.arange(c)[:, None]).ravel()
        cnt = np.bincount(flat, minlength=c * N_SUGGESTIBLE).reshape(c, N_SUGGESTIBLE)
        hit_a = np.bincount(flat, weights=a[idx].ravel(), minlength=c * N_SUGGESTIBLE).reshape(c, -1)
        hit_b = np.bincount(flat, weights=b[idx].ravel(), minlength=c * N_SUGGESTIBLE).reshape(c, -1)
        present = cnt > 0
        safe = np.where(present, cnt, 1)
        diff = ((hit_a - hit_b) / safe * present).sum(axis=1) / present.sum(axis=1)
        worse += int((diff <= 0).sum())
        done += c
    return worse / n_resamples


def paired_ttest(correct_a, correct_b) -> Optional[float]:
    """One-tailed paired t-test over events; None when the two systems never differ."""
    a = np.asarray(correct_a, dtype=float)
    b = np.asarray(correct_b, dtype=float)
    if np.all(a == b):
        return None
    return float(stats.ttest_rel(a, b, alternative="greater").pvalue)


# ----------------------------------------------------------------------
# ablation grid

def cell_config(base: ModelConfig, variant: str, context: int, group: str) -> ModelConfig:
    if group not in FEATURE_GROUPS:
        raise EvalError(f"unknown feature group {group!r}")
    topical = group in ("topical", "all", "+cf")
    profile = group in ("user-profile", "all", "+cf")
    v = variant
    if group == "+cf":
        v = variant if variant in HYBRIDS else variant + "-cf"
        if v not in HYBRIDS:
            raise EvalError(f"{variant} has no CF hybrid")
    crf_cfg = dataclasses.replace(base.crf, window=context)
    return dataclasses.replace(base, variant=v, window=context, topical=topical, profile=profile, crf=crf_cfg)


@dataclass
class AblationCell:
    variant: str
    context: int
    group: str
    macro_accuracy: Optional[float] = None
    micro_accuracy: Optional[float] = None
    n_events: int = 0
    baseline: Optional[str] = None  # the no-feature cell at the same context
    p_bootstrap: Optional[float] = None
    p_ttest: Optional[float] = None
    error: Optional[str] = None

    @property
    def key(self) -> str:
        return f"{self.variant}/{self.context}/{self.group}"


@dataclass
class AblationGrid:
    cells: list
    n_resamples: int = 10_000
    metadata: dict = field(default_factory=dict)

    def get(self, variant: str, context: int, group: str) -> AblationCell:
        for c in self.cells:
            if (c.variant, c.context, c.group) == (variant, context, group):
                return c
        raise KeyError((variant, context, group))

    def to_dict(self) -> dict:
        return {
            "schema": GRID_SCHEMA,
            "metadata": self.metadata,
            "n_resamples": self.n_resamples,
            "cells": [dataclasses.asdict(c) for c in self.cells],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        lines = []
        for v in dict.fromkeys(c.variant for c in self.cells):
            groups = [g for g in FEATURE_GROUPS if any(c.variant == v and c.group == g for c in self.cells)]
            lines.append(v)
            lines.append("context".ljust(10) + "".join(g.rjust(14) for g in groups))
            for m in sorted({c.context for c in self.cells if c.variant == v}):
                row = str(m).ljust(10)
                for g in groups:
                    try:
                        c = self.get(v, m, g)
                    except KeyError:
                        row += "".rjust(14)
                        continue
                    if c.macro_accuracy is None:
                        row += "error".rjust(14)
                    else:
                        mark = "*" if c.p_bootstrap is not None and c.p_bootstrap < 0.05 else ""
                        row += f"{c.macro_accuracy:.3f}{mark}".rjust(14)
                lines.append(row)
            lines.append("")
        lines.append("* paired bootstrap p < 0.05 against the no-feature cell of the same context")
        return "\n".join(lines) + "\n"


def run_ablation(base: ModelConfig, train_data, test_corpus: Sequence[Conversation], variant: str,
                 contexts: Sequence[int] = CONTEXT_SIZES, groups: Sequence[str] = FEATURE_GROUPS,
                 n_resamples: int = 10_000, seed: int = 0) -> AblationGrid:
    """Train and evaluate every (context, group) cell for one variant.

    A cell that fails to train records its error and the grid carries on.
    """
    if not isinstance(train_data, TrainingData):
        train_data = TrainingData(train_data, base.k_neighbors)
    test = list(test_corpus)
    cells, outcomes = [], {}
    for m in contexts:
        for g in groups:
            cell = AblationCell(variant, m, g)
            cells.append(cell)
            try:
                cfg = cell_config(base, variant, m, g)
                model = train(cfg, train_data)
                pred, target, _ = predict_events(model, test)
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                log.warning("ablation cell %s failed: %s", cell.key, exc)
                cell.error = f"{type(exc).__name__}: {exc}"
                continue
            correct = pred == target
            outcomes[(m, g)] = (correct, target)
            cell.macro_accuracy = macro_from(correct, target)
            cell.micro_accuracy = float(correct.mean())
            cell.n_events = int(len(target))
            log.info("ablation %s macro %.4f", cell.key, cell.macro_accuracy)
    for cell in cells:
        ref = (cell.context, "none")
        if cell.group == "none" or cell.error or ref not in outcomes:
            continue
        correct, target = outcomes[(cell.context, cell.group)]
        base_correct, _ = outcomes[ref]
        cell.baseline = f"{variant}/{cell.context}/none"
        cell.p_bootstrap = paired_bootstrap(correct, base_correct, target, n_resamples, seed)
        cell.p_ttest = paired_ttest(correct, base_correct)
    meta = {"variant": variant, "seed": base.seed, "config_hash": base.digest(), "train_corpus_hash": train_data.digest,
            "test_corpus_hash": _corpus_digest(test)}
    return AblationGrid(cells, n_resamples, meta)


__all__ = [
    "EvalReport", "EvalError", "evaluate", "accuracy_by_suggestion_index", "acceptance_rate_by_topic",
    "top_topics", "macro_from", "paired_bootstrap", "paired_ttest", "run_ablation", "AblationGrid",
    "AblationCell", "cell_config", "comparison_table", "FEATURE_GROUPS", "CONTEXT_SIZES",
]
