"""Seeded synthetic conversations with planted topic preferences.

Every simulated user (persona) belongs to a latent archetype with two
favourite topics. The archetype is tied to the user profile (gender and
usual time of day) through an interaction table, so the profile carries
information about preferences, but not additively. Users accept a suggested
topic with probability

    clamp(preference[T] + affinity[previous topic][T] - fatigue * (k - 1), 0, 1)

at the k-th suggestion of a conversation. In small talk and declines users
now and then mention one of their favourite topics in passing, so the text
of earlier turns carries preference evidence that the dialogue state does
not. The logging policy that makes the
suggestions follows a fixed rule of the dialogue state (popularity order to
open, then a topic related to the last engaged one, or an alternative after a
decline) and explores at random with a rate that grows with every
suggestion.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .corpus import (
    N_SUGGESTIBLE,
    SUGGESTIBLE,
    SUGGESTIBLE_INDEX,
    TIMES_OF_DAY,
    Conversation,
    Corpus,
    Topic,
    Turn,
    suggestible_frequency,
)

# (favourite topics) per archetype, as indices into SUGGESTIBLE
ARCHETYPES = (
    (0, 1),  # Movie, Music
    (0, 7),  # Movie, Games
    (1, 2),  # Music, Travel
    (2, 3),  # Travel, Pets_Animal
    (4, 5),  # News, Sports
    (3, 4),  # Pets_Animal, News
    (5, 7),  # Sports, Games
    (0, 4),  # Movie, News
)

# archetype for (gender + 1, usual time of day); read off as an interaction, not a sum
PROFILE_ARCHETYPE = (
    (3, 0, 5, 2),  # female
    (1, 6, 2, 4),  # unknown
    (4, 2, 0, 7),  # male
)

TOPIC_WORDS = {
    Topic.Movie: ("movies", "film", "actor", "cinema", "director", "sequel"),
    Topic.Music: ("music", "song", "band", "album", "concert", "singer"),
    Topic.News: ("news", "headlines", "politics", "election", "report", "story"),
    Topic.Pets_Animal: ("animals", "dog", "cat", "puppy", "zoo", "pets"),
    Topic.Sci_Tech: ("science", "technology", "robots", "space", "computer", "physics"),
    Topic.Sports: ("sports", "football", "basketball", "team", "game", "score"),
    Topic.Travel: ("travel", "trip", "beach", "vacation", "city", "flight"),
    Topic.Games: ("games", "videogame", "console", "level", "player", "minecraft"),
    Topic.Celebrities: ("celebrities", "famous", "star", "gossip", "red", "carpet"),
    Topic.Literature: ("books", "novel", "author", "poem", "reading", "library"),
    Topic.Food_Drinks: ("food", "pizza", "recipe", "coffee", "dinner", "cooking"),
    Topic.Other: ("stuff", "things", "something", "anything", "whatever", "random"),
    Topic.Weather: ("weather", "rain", "sunny", "forecast", "snow", "cold"),
    Topic.Fashion: ("fashion", "clothes", "shoes", "style", "dress", "brand"),
    Topic.Fitness: ("fitness", "gym", "running", "workout", "yoga", "exercise"),
    Topic.Entertainment_and_Cars: ("cars", "engine", "racing", "truck", "drive", "tesla"),
}

ENGAGE_TEMPLATES = (
    "i like {w}", "tell me more about the {w}", "what do you think about {w}",
    "my favorite {w} is great", "i saw something about {w}", "the {w} was really good",
    "did you hear about that {w}", "i love {w}",
)
ACCEPT_TEMPLATES = ("sure", "yes let us talk about {w}", "ok", "yeah {w} sounds good", "sure why not")
REJECT_TEMPLATES = ("no thanks", "not really", "no", "i do not want to", "nah not today")
ASK_TEMPLATES = ("can we talk about {w} instead", "no let us talk about {w}", "i want to talk about {w}")
OPEN_TEMPLATES = ("hi", "hello", "hey there", "good morning", "hi how are you", "let us chat")
PHATIC_TEMPLATES = ("i am fine", "okay", "what is your name", "that is cool", "i do not know", "hmm")
BYE_TEMPLATES = ("bye", "goodbye", "stop", "i have to go", "see you later")
HINT_TEMPLATES = ("i have been into {w} lately", "my friend keeps talking about {w}", "i was just thinking about {w}")

DEFAULT_BASE_PREFERENCE = (0.32, 0.18, 0.16, 0.16, 0.26, 0.12, 0.02, 0.12)


@dataclass(frozen=True)
class Persona:
    preference: tuple[float, ...]
    transition_affinity: tuple[tuple[float, ...], ...]
    fatigue: float
    name_giving_prob: float
    gender: int
    time_profile: tuple[float, ...]
    mean_followup_turns: float
    archetype: int = 0

    def __post_init__(self):
        if len(self.preference) != N_SUGGESTIBLE or not all(0.0 <= p <= 1.0 for p in self.preference):
            raise ValueError("preference must be 8 values in [0, 1]")
        aff = np.asarray(self.transition_affinity)
        if aff.shape != (N_SUGGESTIBLE, N_SUGGESTIBLE) or aff.min() < 0 or aff.max() > 1:
            raise ValueError("transition_affinity must be 8x8 in [0, 1]")
        if np.any(np.diag(aff) != 0):
            raise ValueError("transition_affinity diagonal must be zero")
        if self.fatigue < 0 or not 0 <= self.name_giving_prob <= 1 or self.gender not in (-1, 0, 1):
            raise ValueError("bad persona scalars")
        if abs(sum(self.time_profile) - 1.0) > 1e-9 or len(self.time_profile) != len(TIMES_OF_DAY):
            raise ValueError("time_profile must be a distribution over 4 times of day")
        if self.mean_followup_turns <= 0:
            raise ValueError("mean_followup_turns must be positive")


@dataclass
class SimConfig:
    n_conversations: int = 10000
    target_topic_distribution: dict = field(default_factory=lambda: {t.name: v for t, v in suggestible_frequency().items()})
    persona_count: int = 2000
    master_seed: int = 42
    templates: dict = field(default_factory=dict)  # topic name -> extra keywords
    base_preference: tuple = DEFAULT_BASE_PREFERENCE
    favourite_bonus: float = 0.55
    preference_noise: float = 0.08
    profile_fidelity: float = 0.8  # chance the archetype follows the profile table
    affinity_strength: float = 0.2
    fatigue: float = 0.06
    mean_followup_turns: float = 1.6
    # the logging policy explores (weighted random choice) with a rate growing per suggestion,
    # and otherwise follows a fixed rule of the dialogue state
    explore_base: float = 0.2
    explore_growth: float = 0.1
    explore_max: float = 0.8
    open_with_topic: float = 0.25
    ask_else_prob: float = 0.35
    phatic_prob: float = 0.12
    hint_prob: float = 0.3  # chance a small-talk or decline turn mentions a favourite topic
    end_hazard: float = 0.16
    min_turns: int = 4
    calibration_rounds: int = 4
    calibration_pilot: int = 1500
    start_date: str = "2018-08-01"
    n_days: int = 15

    def __post_init__(self):
        dist = self.target_distribution()
        if abs(dist.sum() - 1.0) > 1e-9 or dist.min() < 0:
            raise ValueError("target_topic_distribution must be a distribution over the 8 suggestible topics")
        if self.n_conversations < 0 or self.persona_count < 1:
            raise ValueError("need n_conversations >= 0 and persona_count >= 1")
        if self.fatigue < 0:
            raise ValueError("fatigue must be nonnegative")

    def target_distribution(self) -> np.ndarray:
        d = self.target_topic_distribution
        keys = {k if isinstance(k, str) else Topic(k).name for k in d}
        unknown = keys - {t.name for t in SUGGESTIBLE}
        if unknown:
            raise ValueError(f"unknown topics in target distribution: {sorted(unknown)}")
        lookup = {(k if isinstance(k, str) else Topic(k).name): v for k, v in d.items()}
        return np.array([float(lookup.get(t.name, 0.0)) for t in SUGGESTIBLE])

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        bad = sorted(set(d) - names)
        if bad:
            raise KeyError(f"unknown simulator keys: {', '.join(bad)}")
        d = dict(d)
        if "base_preference" in d:
            d["base_preference"] = tuple(d["base_preference"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["base_preference"] = list(d["base_preference"])
        return d

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def persona_stream(config: SimConfig, index: int) -> np.random.Generator:
    return _stream(config.master_seed, 1, index)


def conversation_stream(config: SimConfig, index: int) -> np.random.Generator:
    return _stream(config.master_seed, 2, index)


# topic pairs (a, b): users who just engaged with a like b, and the logging policy knows it
_AFFINITY_PAIRS = ((0, 1), (1, 7), (2, 3), (3, 2), (4, 3), (5, 4), (6, 5), (7, 0))
RELATED = {SUGGESTIBLE[a]: SUGGESTIBLE[b] for a, b in _AFFINITY_PAIRS}
# what the logging policy tries after a topic was declined
_ALTERNATIVE_PAIRS = ((0, 4), (1, 2), (2, 5), (3, 7), (4, 3), (5, 1), (6, 0), (7, 4))
ALTERNATIVE = {SUGGESTIBLE[a]: SUGGESTIBLE[b] for a, b in _ALTERNATIVE_PAIRS}


def sample_persona(rng: np.random.Generator, config: SimConfig) -> Persona:
    gender = int(rng.choice([-1, 0, 1], p=[0.42, 0.16, 0.42]))
    usual = int(rng.integers(len(TIMES_OF_DAY)))
    time_profile = np.full(len(TIMES_OF_DAY), 0.1)
    time_profile[usual] = 0.7
    if rng.random() < config.profile_fidelity:
        archetype = PROFILE_ARCHETYPE[gender + 1][usual]
    else:
        archetype = int(rng.integers(len(ARCHETYPES)))
    pref = np.array(config.base_preference, dtype=float)
    pref[list(ARCHETYPES[archetype])] += config.favourite_bonus
    pref += rng.normal(0.0, config.preference_noise, N_SUGGESTIBLE)
    pref = np.clip(pref, 0.0, 1.0)
    aff = np.zeros((N_SUGGESTIBLE, N_SUGGESTIBLE))
    for a, b in _AFFINITY_PAIRS:
        aff[a, b] = config.affinity_strength
    aff = np.clip(aff * rng.uniform(0.5, 1.5, aff.shape), 0.0, 1.0)
    np.fill_diagonal(aff, 0.0)
    fatigue = float(config.fatigue * rng.uniform(0.5, 1.5))
    return Persona(
        preference=tuple(float(x) for x in pref),
        transition_affinity=tuple(tuple(float(x) for x in row) for row in aff),
        fatigue=fatigue,
        name_giving_prob=float(rng.uniform(0.2, 0.8) if gender != 0 else 0.0),
        gender=gender,
        time_profile=tuple(float(x) for x in time_profile / time_profile.sum()),
        mean_followup_turns=float(config.mean_followup_turns * rng.uniform(0.7, 1.3)),
        archetype=archetype,
    )


def acceptance_probability(p: Persona, topic: Topic, prev_engaged: Optional[Topic], k: int) -> float:
    """Chance that ``p`` accepts ``topic`` as the ``k``-th suggestion of a conversation."""
    t = SUGGESTIBLE_INDEX[topic]
    score = p.preference[t] - p.fatigue * (k - 1)
    if prev_engaged in SUGGESTIBLE_INDEX:
        score += p.transition_affinity[SUGGESTIBLE_INDEX[prev_engaged]][t]
    return min(1.0, max(0.0, score))


def logging_weights(config: SimConfig) -> np.ndarray:
    """Exploration weights chosen so that accepted topics roughly follow the target distribution."""
    fav = np.zeros(N_SUGGESTIBLE)
    for a, b in ARCHETYPES:
        fav[a] += 1
        fav[b] += 1
    mean_pref = np.clip(np.array(config.base_preference) + config.favourite_bonus * fav / len(ARCHETYPES), 0.05, 1.0)
    w = config.target_distribution() / mean_pref
    return w / w.sum()


def _popularity_first(time_of_day: str, excluded) -> Optional[Topic]:
    third = {"Morning": Topic.Pets_Animal, "Day": Topic.Travel}.get(time_of_day, Topic.Games)
    order = [Topic.Movie, Topic.Music, third]
    freq = suggestible_frequency()
    order += sorted((t for t in SUGGESTIBLE if t not in order), key=lambda t: (-freq[t], SUGGESTIBLE_INDEX[t]))
    for t in order:
        if t not in excluded:
            return t
    return None


class _Dialogue:
    """Mutable turn builder for one simulated conversation."""

    def __init__(self, persona: Persona, rng: np.random.Generator, config: SimConfig, time_of_day: str,
                 weights=None):
        self.p = persona
        self.rng = rng
        self.cfg = config
        self.time_of_day = time_of_day
        self.turns: list[Turn] = []
        self.suggested: list[Topic] = []
        self.rejected: list[Topic] = []
        self.pst: Optional[Topic] = None
        self.prev_engaged: Optional[Topic] = None
        # last topical reaction: (topic, engaged?) steering the structured part of the policy
        self.anchor: Optional[tuple] = None
        self.weights = weights if weights is not None else logging_weights(config)
        # separate stream, so hints leave every other draw of the conversation unchanged
        self.hint_rng = rng.spawn(1)[0]

    def words(self, topic: Topic) -> tuple[str, ...]:
        extra = tuple(self.cfg.templates.get(topic.name, ()))
        return TOPIC_WORDS[topic] + extra

    def say(self, templates, topic: Optional[Topic] = None) -> str:
        tpl = templates[int(self.rng.integers(len(templates)))]
        if "{w}" in tpl:
            words = self.words(topic)
            tpl = tpl.format(w=words[int(self.rng.integers(len(words)))])
        return tpl

    def small_talk(self, templates) -> str:
        """Non-topical utterance, sometimes followed by a passing mention of a favourite topic."""
        text = self.say(templates)
        h = self.hint_rng
        if h.random() < self.cfg.hint_prob:
            fav = SUGGESTIBLE[ARCHETYPES[self.p.archetype][int(h.integers(2))]]
            words = self.words(fav)
            tpl = HINT_TEMPLATES[int(h.integers(len(HINT_TEMPLATES)))]
            text = f"{text} {tpl.format(w=words[int(h.integers(len(words)))])}"
        return text

    def exploration_rate(self) -> float:
        k = len(self.suggested)
        return min(self.cfg.explore_max, self.cfg.explore_base + self.cfg.explore_growth * k)

    def choose_suggestion(self) -> Optional[Topic]:
        left = [t for t in SUGGESTIBLE if t not in self.suggested]
        if not left:
            return None
        if self.rng.random() >= self.exploration_rate():
            if self.anchor is None:
                return _popularity_first(self.time_of_day, self.suggested)
            topic, engaged = self.anchor
            pick = (RELATED if engaged else ALTERNATIVE).get(topic)
            if pick in left:
                return pick
            return _popularity_first(self.time_of_day, self.suggested)
        w = np.array([self.weights[SUGGESTIBLE_INDEX[t]] for t in left])
        return left[int(self.rng.choice(len(left), p=w / w.sum()))]

    def add(self, utterance: str, topic: Topic, suggest: Optional[Topic], content: Optional[Topic] = None):
        prev_state = self.turns[-1].topic if self.turns else None
        if suggest is not None:
            response = f"would you like to talk about {self.words(suggest)[0]}"
        elif content is not None and content is not Topic.Phatic:
            response = f"here is something about {self.words(content)[1]}"
        else:
            response = "i see"
        self.turns.append(
            Turn(
                index=len(self.turns) + 1,
                user_utterance=utterance,
                system_response=response,
                topic=topic,
                previous_state=prev_state,
                previous_suggested_topic=self.pst,
            )
        )
        if suggest is not None:
            self.suggested.append(suggest)
            self.pst = suggest

    def requested_topic(self, exclude) -> Topic:
        pref = np.array(self.p.preference) + 1e-3
        for t in exclude:
            pref[SUGGESTIBLE_INDEX[t]] = 0.0
        if pref.sum() <= 0:
            pref = np.ones(N_SUGGESTIBLE)
        return SUGGESTIBLE[int(self.rng.choice(N_SUGGESTIBLE, p=pref / pref.sum()))]


def generate_conversation(p: Persona, rng: np.random.Generator, config: SimConfig, conversation_id: str = "c0",
                          user_id: str = "u0", date: dt.date | None = None, weights=None) -> Conversation:
    """Simulate one conversation of ``p`` with the logging policy.

    The system suggests a topic whenever a topical run ends or the user
    declines; the conversation can only end at such a point, so no
    suggestion is left without a user reaction.
    """
    cfg = config
    time_of_day = TIMES_OF_DAY[int(rng.choice(len(TIMES_OF_DAY), p=np.array(p.time_profile)))]
    name_given = bool(rng.random() < p.name_giving_prob)
    d = _Dialogue(p, rng, cfg, time_of_day, weights)
    stay = p.mean_followup_turns / (1.0 + p.mean_followup_turns)

    def close_turn(utterance: str, topic: Topic) -> Optional[Topic]:
        """Add a user turn after which the system suggests, or wrap up; returns the new suggestion."""
        long_enough = len(d.turns) + 2 >= cfg.min_turns
        nxt = None if long_enough and rng.random() < cfg.end_hazard else d.choose_suggestion()
        d.add(utterance, topic, nxt, content=topic)
        return nxt

    def run(topic: Topic, utterance: str) -> Optional[Topic]:
        while rng.random() < stay:
            d.add(utterance, topic, None, content=topic)
            utterance = d.say(ENGAGE_TEMPLATES, topic)
        if topic in SUGGESTIBLE_INDEX:
            d.prev_engaged = topic
            d.anchor = (topic, True)
        return close_turn(utterance, topic)

    if rng.random() < cfg.open_with_topic:
        t = d.requested_topic(())
        pending = run(t, d.say(ASK_TEMPLATES[2:], t))
    else:
        pending = d.choose_suggestion()
        d.add(d.small_talk(OPEN_TEMPLATES), Topic.Phatic, pending)

    while pending is not None:
        k = len(d.suggested)
        if rng.random() < acceptance_probability(p, pending, d.prev_engaged, k):
            pending = run(pending, d.say(ACCEPT_TEMPLATES, pending))
        elif rng.random() < cfg.ask_else_prob:
            asked = d.requested_topic((pending,))
            pending = run(asked, d.say(ASK_TEMPLATES, asked))
        else:
            d.anchor = (pending, False)
            utt = d.small_talk(PHATIC_TEMPLATES if rng.random() < cfg.phatic_prob else REJECT_TEMPLATES)
            pending = close_turn(utt, Topic.Phatic)
    d.add(d.say(BYE_TEMPLATES), Topic.Phatic, None)
    return Conversation(
        conversation_id=conversation_id,
        user_id=user_id,
        date=date or dt.date(2018, 8, 1),
        time_of_day=time_of_day,
        name_given=name_given,
        gender=p.gender,
        turns=tuple(d.turns),
    )


def _make_one(config, index, personas, weights, stream=2):
    rng = _stream(config.master_seed, stream, index)
    who = int(rng.integers(len(personas)))
    start = dt.date.fromisoformat(config.start_date)
    date = start + dt.timedelta(days=int(rng.integers(config.n_days)))
    return generate_conversation(personas[who], rng, config, f"c{index:06d}", f"u{who:05d}", date, weights)


def _make_chunk(args):
    config, indices, personas, weights = args
    return [_make_one(config, i, personas, weights) for i in indices]


def engagement_distribution(convs) -> np.ndarray:
    counts = np.zeros(N_SUGGESTIBLE)
    for c in convs:
        for turn in c.turns:
            if turn.topic in SUGGESTIBLE_INDEX:
                counts[SUGGESTIBLE_INDEX[turn.topic]] += 1
    return counts / max(counts.sum(), 1.0)


def calibrate_logging_weights(config: SimConfig, personas, rounds: int = None, pilot: int = None) -> np.ndarray:
    """Multiplicative fixed-point updates of the exploration weights on pilot corpora.

    Pilot conversations use their own seed streams, so the calibration never
    consumes randomness of the real corpus.
    """
    rounds = config.calibration_rounds if rounds is None else rounds
    pilot = config.calibration_pilot if pilot is None else pilot
    target = config.target_distribution()
    w = logging_weights(config)
    for r in range(rounds):
        convs = [_make_one(config, i, personas, w, stream=100 + r) for i in range(pilot)]
        emp = engagement_distribution(convs)
        ratio = np.where(emp > 0, target / np.maximum(emp, 1e-12), 2.0)
        w = np.clip(w * ratio ** 1.5, 1e-6, None)
        w /= w.sum()
    return w


def persona_pool(config: SimConfig) -> list[Persona]:
    return [sample_persona(persona_stream(config, j), config) for j in range(config.persona_count)]


def generate_corpus(config: SimConfig, jobs: int = 1) -> Corpus:
    """``n_conversations`` conversations; conversation ``i`` depends only on (seed, i)."""
    personas = persona_pool(config)
    n = config.n_conversations
    weights = calibrate_logging_weights(config, personas) if n else None
    if jobs <= 1 or n < 2 * jobs:
        convs = [_make_one(config, i, personas, weights) for i in range(n)]
    else:
        chunks = [list(range(j, n, jobs)) for j in range(jobs)]
        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(_make_chunk, [(config, ch, personas, weights) for ch in chunks]))
        convs = [None] * n
        for ch, part in zip(chunks, parts):
            for i, c in zip(ch, part):
                convs[i] = c
    return Corpus(tuple(convs))


def cutoff_date(config: SimConfig, train_days: int = 10) -> dt.date:
    """First test day when the first ``train_days`` days are used for training."""
    return dt.date.fromisoformat(config.start_date) + dt.timedelta(days=train_days)
