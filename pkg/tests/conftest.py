import datetime as dt

import numpy as np
import pytest

from topicsuggest import simulator
from topicsuggest.corpus import Conversation, Corpus, Topic, Turn, split_by_date

T = Topic

# (utterance, topic, previous suggested topic) for the worked example conversation
EXAMPLE_ROWS = [
    ("Hi, let's chat.", T.Music, None),
    ("Tell me recent songs.", T.Music, T.Music),
    ("No I do not.", T.Music, T.Music),
    ("Oh, no.", T.Phatic, T.Music),
    ("I love traveling.", T.Travel, T.Travel),
    ("Somewhere in Australia.", T.Travel, T.Travel),
    ("Yes.", T.Travel, T.Travel),
    ("No thanks, let's talk about something else.", T.Phatic, T.Travel),
    ("No, news is boring.", T.Phatic, T.News),
    ("Okay, that sounds interesting.", T.Movie, T.Movie),
    ("I like both.", T.Movie, T.Movie),
    ("I have to go, bye!", T.Phatic, T.Movie),
]
EXAMPLE_LABELS = [
    "chat", "Music_accept", "follow-up", "chat", "Travel_accept", "follow-up",
    "follow-up", "chat", "News_reject", "Movie_accept", "follow-up", "chat",
]


def make_conversation(rows, cid="c1", uid="u1", date=dt.date(2018, 8, 1), tod="Evening", name_given=True,
                      gender=1, partial=False):
    """rows: (utterance, topic, pst) triples; previous_state is the prior turn's topic."""
    turns = []
    for k, (utt, topic, pst) in enumerate(rows, start=1):
        prev = rows[k - 2][1] if k > 1 else None
        turns.append(Turn(k, utt, "ok", topic, prev, pst))
    return Conversation(cid, uid, date, tod, name_given, gender, tuple(turns), partial=partial)


def topic_rows(topics, psts):
    return [(f"talk {t.name.lower()}", t, p) for t, p in zip(topics, psts)]


@pytest.fixture
def example_conversation():
    return make_conversation(EXAMPLE_ROWS)


@pytest.fixture(scope="session")
def small_config():
    return simulator.SimConfig(n_conversations=400, calibration_pilot=200, calibration_rounds=2)


@pytest.fixture(scope="session")
def small_corpus(small_config) -> Corpus:
    return simulator.generate_corpus(small_config)


@pytest.fixture(scope="session")
def small_split(small_config, small_corpus):
    return split_by_date(small_corpus, simulator.cutoff_date(small_config))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, shown whether or not output is captured
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
