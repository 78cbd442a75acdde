"""Conversation data model, JSONL serialization and ground-truth labeling.

Topic codes are stable and documented here:

====  ======================
code  topic
====  ======================
0     Movie
1     Music
2     News
3     Pets_Animal
4     Sci_Tech
5     Sports
6     Travel
7     Games
8     Celebrities
9     Literature
10    Food_Drinks
11    Other
12    Weather
13    Fashion
14    Fitness
15    Entertainment_and_Cars
16    Phatic
====  ======================

The eight suggestible topics are ordered Movie, Music, Travel, Pets_Animal,
News, Sports, Entertainment_and_Cars, Games; every 8-way score vector in the
package uses that order.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Iterator, Optional, Sequence, TextIO

log = logging.getLogger(__name__)


class Topic(IntEnum):
    Movie = 0
    Music = 1
    News = 2
    Pets_Animal = 3
    Sci_Tech = 4
    Sports = 5
    Travel = 6
    Games = 7
    Celebrities = 8
    Literature = 9
    Food_Drinks = 10
    Other = 11
    Weather = 12
    Fashion = 13
    Fitness = 14
    Entertainment_and_Cars = 15
    Phatic = 16

    @classmethod
    def parse(cls, name: str) -> "Topic":
        try:
            return cls[name]
        except KeyError:
            raise CorpusError(f"unknown topic {name!r}") from None


SUGGESTIBLE: tuple[Topic, ...] = (
    Topic.Movie,
    Topic.Music,
    Topic.Travel,
    Topic.Pets_Animal,
    Topic.News,
    Topic.Sports,
    Topic.Entertainment_and_Cars,
    Topic.Games,
)
SUGGESTIBLE_INDEX = {t: k for k, t in enumerate(SUGGESTIBLE)}
N_TOPICS = len(Topic)
N_SUGGESTIBLE = len(SUGGESTIBLE)

# Relative topic frequencies of the source deployment, in percent.
TOPIC_FREQUENCY = {
    Topic.Movie: 20.1,
    Topic.Music: 14.4,
    Topic.News: 18.4,
    Topic.Pets_Animal: 10.0,
    Topic.Sci_Tech: 6.0,
    Topic.Sports: 6.0,
    Topic.Travel: 9.1,
    Topic.Games: 6.0,
    Topic.Celebrities: 2.5,
    Topic.Literature: 1.5,
    Topic.Food_Drinks: 1.5,
    Topic.Other: 1.5,
    Topic.Weather: 1.5,
    Topic.Fashion: 1.0,
    Topic.Fitness: 1.0,
    Topic.Entertainment_and_Cars: 1.0,
}


def suggestible_frequency() -> dict[Topic, float]:
    """Frequencies restricted to the suggestible topics, renormalized to 1."""
    total = sum(TOPIC_FREQUENCY[t] for t in SUGGESTIBLE)
    return {t: TOPIC_FREQUENCY[t] / total for t in SUGGESTIBLE}


def frequency_order() -> list[Topic]:
    """Suggestible topics by descending global frequency (ties keep SUGGESTIBLE order)."""
    freq = suggestible_frequency()
    return sorted(SUGGESTIBLE, key=lambda t: (-freq[t], SUGGESTIBLE_INDEX[t]))


TIMES_OF_DAY = ("Morning", "Day", "Evening", "Night")


class CorpusError(ValueError):
    pass


# ----------------------------------------------------------------------
# labels

class LabelKind(IntEnum):
    Accept = 0
    Reject = 1
    FollowUp = 2
    Chat = 3


@dataclass(frozen=True)
class TurnLabel:
    kind: LabelKind
    topic: Optional[Topic] = None

    def __post_init__(self):
        needs_topic = self.kind in (LabelKind.Accept, LabelKind.Reject)
        if needs_topic and self.topic not in SUGGESTIBLE_INDEX:
            raise CorpusError(f"{self.kind.name} needs a suggestible topic, got {self.topic}")
        if not needs_topic and self.topic is not None:
            raise CorpusError(f"{self.kind.name} carries no topic")

    @classmethod
    def accept(cls, topic: Topic) -> "TurnLabel":
        return cls(LabelKind.Accept, topic)

    @classmethod
    def reject(cls, topic: Topic) -> "TurnLabel":
        return cls(LabelKind.Reject, topic)

    @property
    def is_event(self) -> bool:
        return self.kind in (LabelKind.Accept, LabelKind.Reject)

    def __str__(self) -> str:
        if self.kind is LabelKind.Accept:
            return f"{self.topic.name}_accept"
        if self.kind is LabelKind.Reject:
            return f"{self.topic.name}_reject"
        return "follow-up" if self.kind is LabelKind.FollowUp else "chat"


FOLLOW_UP = TurnLabel(LabelKind.FollowUp)
CHAT = TurnLabel(LabelKind.Chat)


# ----------------------------------------------------------------------
# conversations

def tokenize(text: str) -> tuple[str, ...]:
    return tuple(w.strip(".,!?;:'\"") for w in text.lower().split() if w.strip(".,!?;:'\""))


@dataclass(frozen=True)
class Turn:
    index: int
    user_utterance: str
    system_response: str
    topic: Topic
    previous_state: Optional[Topic] = None
    previous_suggested_topic: Optional[Topic] = None
    label: Optional[TurnLabel] = None

    @property
    def tokens(self) -> tuple[str, ...]:
        return tokenize(self.user_utterance)


@dataclass(frozen=True)
class Conversation:
    conversation_id: str
    user_id: str
    date: dt.date
    time_of_day: str
    name_given: bool
    gender: int
    turns: tuple[Turn, ...]
    # a live session still being built; exempt from the minimum length
    partial: bool = field(default=False, compare=False, repr=False)

    def __post_init__(self):
        if self.time_of_day not in TIMES_OF_DAY:
            raise CorpusError(f"bad time_of_day {self.time_of_day!r}")
        if self.gender not in (-1, 0, 1):
            raise CorpusError(f"bad gender {self.gender!r}")
        if len(self.turns) < 4 and not self.partial:
            raise CorpusError(f"{self.conversation_id}: {len(self.turns)} turns, need at least 4")
        for k, turn in enumerate(self.turns, start=1):
            if turn.index != k:
                raise CorpusError(f"{self.conversation_id}: turn {k} has index {turn.index}")
        if self.turns and self.turns[0].previous_state is not None:
            raise CorpusError(f"{self.conversation_id}: first turn has a previous state")
        for turn in self.turns:
            pst = turn.previous_suggested_topic
            if pst is not None and pst not in SUGGESTIBLE_INDEX:
                raise CorpusError(f"{self.conversation_id}: {pst.name} is not suggestible")

    def __len__(self) -> int:
        return len(self.turns)

    @property
    def labeled(self) -> bool:
        return all(t.label is not None for t in self.turns)

    def with_labels(self, labels: Sequence[TurnLabel]) -> "Conversation":
        turns = tuple(replace(t, label=lab) for t, lab in zip(self.turns, labels))
        return replace(self, turns=turns)

    def labels(self) -> list[Optional[TurnLabel]]:
        return [t.label for t in self.turns]


@dataclass(frozen=True)
class Corpus:
    conversations: tuple[Conversation, ...]
    # provenance tag set by split_by_date: "train", "test" or None
    split: Optional[str] = None

    def __post_init__(self):
        seen = set()
        for c in self.conversations:
            if c.conversation_id in seen:
                raise CorpusError(f"duplicate conversation_id {c.conversation_id!r}")
            seen.add(c.conversation_id)

    def __len__(self) -> int:
        return len(self.conversations)

    def __iter__(self) -> Iterator[Conversation]:
        return iter(self.conversations)

    @property
    def topic_distribution(self) -> dict[Topic, float]:
        """Fraction of engaged turns per suggestible topic."""
        counts = {t: 0 for t in SUGGESTIBLE}
        for c in self.conversations:
            for turn in c.turns:
                if turn.topic in counts:
                    counts[turn.topic] += 1
        total = sum(counts.values())
        if total == 0:
            return {t: 0.0 for t in SUGGESTIBLE}
        return {t: n / total for t, n in counts.items()}

    def digest(self) -> str:
        return hashlib.sha256(dumps_corpus(self).encode()).hexdigest()[:16]


# ----------------------------------------------------------------------
# JSONL

def _topic_or_none(v) -> Optional[Topic]:
    return None if v is None else Topic.parse(v)


def conversation_to_dict(c: Conversation) -> dict:
    return {
        "conversation_id": c.conversation_id,
        "user_id": c.user_id,
        "date": c.date.isoformat(),
        "time_of_day": c.time_of_day,
        "name_given": c.name_given,
        "gender": c.gender,
        "turns": [
            {
                "index": t.index,
                "user_utterance": t.user_utterance,
                "system_response": t.system_response,
                "topic": t.topic.name,
                "previous_state": None if t.previous_state is None else t.previous_state.name,
                "previous_suggested_topic": (
                    None if t.previous_suggested_topic is None else t.previous_suggested_topic.name
                ),
            }
            for t in c.turns
        ],
    }


def conversation_from_dict(d: dict) -> Conversation:
    turns = tuple(
        Turn(
            index=int(t["index"]),
            user_utterance=str(t["user_utterance"]),
            system_response=str(t["system_response"]),
            topic=Topic.parse(t["topic"]),
            previous_state=_topic_or_none(t["previous_state"]),
            previous_suggested_topic=_topic_or_none(t["previous_suggested_topic"]),
        )
        for t in d["turns"]
    )
    gender = d["gender"]
    if isinstance(gender, bool) or not isinstance(gender, int):
        raise CorpusError(f"bad gender {gender!r}")
    if not isinstance(d["name_given"], bool):
        raise CorpusError(f"bad name_given {d['name_given']!r}")
    return Conversation(
        conversation_id=str(d["conversation_id"]),
        user_id=str(d["user_id"]),
        date=dt.date.fromisoformat(d["date"]),
        time_of_day=d["time_of_day"],
        name_given=d["name_given"],
        gender=gender,
        turns=turns,
    )


def parse_corpus(lines: Iterable[str]) -> Corpus:
    """Parse a JSONL conversation stream. Blank lines are skipped."""
    conversations = []
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            conv = conversation_from_dict(json.loads(line))
        except CorpusError as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
        except (ValueError, KeyError, TypeError) as exc:
            raise CorpusError(f"line {lineno}: malformed record ({exc})") from None
        if conv.conversation_id in seen:
            raise CorpusError(f"line {lineno}: duplicate conversation_id {conv.conversation_id!r}")
        seen.add(conv.conversation_id)
        conversations.append(conv)
    return Corpus(tuple(conversations))


def dumps_conversation(c: Conversation) -> str:
    return json.dumps(conversation_to_dict(c), separators=(",", ":"))


def dumps_corpus(corpus: Corpus) -> str:
    return "".join(dumps_conversation(c) + "\n" for c in corpus)


def write_corpus(corpus: Corpus, fh: TextIO) -> None:
    for c in corpus:
        fh.write(dumps_conversation(c))
        fh.write("\n")


def load_corpus(path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh)


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_corpus(corpus, fh)


# ----------------------------------------------------------------------
# ground truth

def _new_suggestion(turns: Sequence[Turn], k: int) -> Optional[Topic]:
    """Topic whose suggestion the user reacts to at position k (0-based), if any.

    A suggestion is pending at a turn when its previous-suggested-topic field
    differs from the one logged on the turn before.
    """
    pst = turns[k].previous_suggested_topic
    before = turns[k - 1].previous_suggested_topic if k > 0 else None
    if pst is not None and pst != before:
        return pst
    return None


def training_labels(c: Conversation) -> list[TurnLabel]:
    labels = []
    for k, turn in enumerate(c.turns):
        pending = _new_suggestion(c.turns, k)
        if pending is not None:
            labels.append(TurnLabel.accept(pending) if turn.topic == pending else TurnLabel.reject(pending))
        elif turn.topic is Topic.Phatic:
            labels.append(CHAT)
        elif k > 0 and c.turns[k - 1].topic == turn.topic:
            labels.append(FOLLOW_UP)
        else:
            labels.append(CHAT)
    return labels


def assign_training_labels(c: Conversation) -> Conversation:
    return c.with_labels(training_labels(c))


def promote_rejections(c: Conversation, labels: Sequence[TurnLabel]) -> list[TurnLabel]:
    out = list(labels)
    for k, lab in enumerate(labels):
        if lab.kind is LabelKind.Reject:
            if any(t.topic == lab.topic for t in c.turns[k + 1:]):
                out[k] = TurnLabel.accept(lab.topic)
    return out


def assign_test_labels(c: Conversation) -> Conversation:
    return c.with_labels(promote_rejections(c, training_labels(c)))


# ----------------------------------------------------------------------
# splitting

def split_by_date(corpus: Corpus, cutoff: dt.date) -> tuple[Corpus, Corpus]:
    train = tuple(c for c in corpus if c.date < cutoff)
    test = tuple(c for c in corpus if c.date >= cutoff)
    if not train:
        warnings.warn(f"no conversations before {cutoff}", stacklevel=2)
    if not test:
        warnings.warn(f"no conversations on or after {cutoff}", stacklevel=2)
    return Corpus(train, split="train"), Corpus(test, split="test")


@dataclass
class Event:
    """One scorable suggestion reaction: the user's verdict on a topic at ``turn``."""

    conversation: Conversation  # training-labeled
    turn: int  # 1-based index of the reaction turn
    topic: Topic
    accepted: bool  # after promotion
    ordinal: int  # 1 for the first suggestion in the conversation
    suggested_before: frozenset = field(default_factory=frozenset)


def suggestion_events(c: Conversation) -> list[Event]:
    """All suggestion reactions of a conversation, with promotion applied."""
    train = training_labels(c)
    test = promote_rejections(c, train)
    labeled = c.with_labels(train)
    events = []
    before: set = set()
    for k, (lab, final) in enumerate(zip(train, test)):
        if not lab.is_event:
            continue
        events.append(
            Event(
                conversation=labeled,
                turn=k + 1,
                topic=lab.topic,
                accepted=final.kind is LabelKind.Accept,
                ordinal=len(events) + 1,
                suggested_before=frozenset(before),
            )
        )
        before.add(lab.topic)
    return events
