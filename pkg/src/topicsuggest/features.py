"""Dialogue-state features and per-turn feature vectors.

Feature vector layout (version ``fv-1``, 68 entries)::

    [ 0: 8]  topic response per suggestible topic, in {-1, 0, +1}
    [ 8:26]  most recent engaged topic, one-hot over 17 topics + None
    [26:44]  second most recent engaged topic, same encoding
    [44:53]  previously accepted topic, one-hot over 8 suggestible + None
    [53:62]  previously rejected topic, same encoding
    [62]     name given (0/1)
    [63]     gender (-1 female, +1 male, 0 unknown)
    [64:68]  time of day, one-hot Morning/Day/Evening/Night
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .corpus import (
    N_SUGGESTIBLE,
    N_TOPICS,
    SUGGESTIBLE,
    SUGGESTIBLE_INDEX,
    TIMES_OF_DAY,
    Conversation,
    LabelKind,
    Topic,
    training_labels,
)

FV_LAYOUT_VERSION = "fv-1"

_BLOCKS = (
    ("topic_response", N_SUGGESTIBLE),
    ("prev_topic_1", N_TOPICS + 1),
    ("prev_topic_2", N_TOPICS + 1),
    ("prev_accepted", N_SUGGESTIBLE + 1),
    ("prev_rejected", N_SUGGESTIBLE + 1),
    ("name_given", 1),
    ("gender", 1),
    ("time_of_day", len(TIMES_OF_DAY)),
)


def _offsets():
    out, start = {}, 0
    for name, size in _BLOCKS:
        out[name] = slice(start, start + size)
        start += size
    return out, start


FV_SLICES, FV_DIM = _offsets()
ONE_HOT_BLOCKS = ("prev_topic_1", "prev_topic_2", "prev_accepted", "prev_rejected", "time_of_day")
TOPICAL = slice(0, FV_SLICES["prev_rejected"].stop)
PROFILE = slice(FV_SLICES["name_given"].start, FV_DIM)

FV_LAYOUT = {
    "version": FV_LAYOUT_VERSION,
    "dim": FV_DIM,
    "blocks": [[name, size] for name, size in _BLOCKS],
    "topics": [t.name for t in Topic],
    "suggestible": [t.name for t in SUGGESTIBLE],
    "times_of_day": list(TIMES_OF_DAY),
}


@dataclass(frozen=True)
class StateFeatures:
    topic_response: tuple[int, ...] = (0,) * N_SUGGESTIBLE
    prev_topic_1: Optional[Topic] = None
    prev_topic_2: Optional[Topic] = None
    prev_accepted: Optional[Topic] = None
    prev_rejected: Optional[Topic] = None
    name_given: bool = False
    gender: int = 0
    time_of_day: str = "Morning"

    def __post_init__(self):
        if len(self.topic_response) != N_SUGGESTIBLE or any(v not in (-1, 0, 1) for v in self.topic_response):
            raise ValueError(f"bad topic_response {self.topic_response}")

    def describe(self) -> dict:
        name = lambda t: None if t is None else t.name  # noqa: E731
        return {
            "topic_response": {t.name: v for t, v in zip(SUGGESTIBLE, self.topic_response)},
            "prev_topic_1": name(self.prev_topic_1),
            "prev_topic_2": name(self.prev_topic_2),
            "prev_accepted": name(self.prev_accepted),
            "prev_rejected": name(self.prev_rejected),
            "name_given": self.name_given,
            "gender": self.gender,
            "time_of_day": self.time_of_day,
        }


def _labels_of(c: Conversation):
    if c.labeled:
        return c.labels()
    return training_labels(c)


def extract_state_features(c: Conversation, i: int) -> StateFeatures:
    """State before turn ``i`` (1-based), built from turns 1..i-1 only.

    ``i`` may be ``len(c) + 1``, the state after the final turn.
    """
    if not 1 <= i <= len(c) + 1:
        raise IndexError(f"turn {i} out of range for {len(c)}-turn conversation")
    labels = _labels_of(c)[: i - 1]
    response = [0] * N_SUGGESTIBLE
    prev_accepted = prev_rejected = None
    for lab in labels:
        if lab.kind is LabelKind.Accept:
            response[SUGGESTIBLE_INDEX[lab.topic]] = 1
            prev_accepted = lab.topic
        elif lab.kind is LabelKind.Reject:
            k = SUGGESTIBLE_INDEX[lab.topic]
            # an earlier accept outranks a later reject
            if response[k] != 1:
                response[k] = -1
            prev_rejected = lab.topic

    engaged: list[Topic] = []
    for turn in reversed(c.turns[: i - 1]):
        if turn.topic is not Topic.Phatic and turn.topic not in engaged:
            engaged.append(turn.topic)
            if len(engaged) == 2:
                break
    engaged += [None] * (2 - len(engaged))

    return StateFeatures(
        topic_response=tuple(response),
        prev_topic_1=engaged[0],
        prev_topic_2=engaged[1],
        prev_accepted=prev_accepted,
        prev_rejected=prev_rejected,
        name_given=c.name_given,
        gender=c.gender,
        time_of_day=c.time_of_day,
    )


def state_features_all(c: Conversation) -> list[StateFeatures]:
    """``extract_state_features(c, i)`` for i = 1..len(c)+1 in one pass."""
    return [extract_state_features(c, i) for i in range(1, len(c) + 2)]


def assemble_fv(s: StateFeatures) -> np.ndarray:
    v = np.zeros(FV_DIM)
    v[FV_SLICES["topic_response"]] = s.topic_response

    def hot(block, code):
        sl = FV_SLICES[block]
        v[sl.start + code] = 1.0

    hot("prev_topic_1", N_TOPICS if s.prev_topic_1 is None else int(s.prev_topic_1))
    hot("prev_topic_2", N_TOPICS if s.prev_topic_2 is None else int(s.prev_topic_2))
    hot("prev_accepted", N_SUGGESTIBLE if s.prev_accepted is None else SUGGESTIBLE_INDEX[s.prev_accepted])
    hot("prev_rejected", N_SUGGESTIBLE if s.prev_rejected is None else SUGGESTIBLE_INDEX[s.prev_rejected])
    v[FV_SLICES["name_given"]] = float(s.name_given)
    v[FV_SLICES["gender"]] = float(s.gender)
    hot("time_of_day", TIMES_OF_DAY.index(s.time_of_day))
    return v


def conversation_fvs(c: Conversation) -> np.ndarray:
    """Row ``i-1`` holds the feature vector of the state before turn ``i``; shape (n+1, 68)."""
    return np.stack([assemble_fv(s) for s in state_features_all(c)])


@dataclass(frozen=True)
class TurnView:
    """One window slot: a turn's tokens and the dialogue state once that turn is over."""

    index: int  # 1-based turn index, 0 for padding
    tokens: tuple[str, ...]
    state: StateFeatures
    pad: bool = False


@dataclass(frozen=True)
class ContextWindow:
    turns: tuple[TurnView, ...]

    @property
    def m(self) -> int:
        return len(self.turns)


PAD_VIEW = TurnView(index=0, tokens=(), state=StateFeatures(), pad=True)


def make_window(c: Conversation, i: int, m: int = 5) -> ContextWindow:
    """Turns i-m+1..i, left-padded with flagged empty slots."""
    if i < 1 or m < 1:
        raise ValueError("need i >= 1 and m >= 1")
    views = []
    for j in range(i - m + 1, i + 1):
        if j < 1:
            views.append(PAD_VIEW)
        else:
            views.append(TurnView(index=j, tokens=c.turns[j - 1].tokens, state=extract_state_features(c, j + 1)))
    return ContextWindow(tuple(views))
