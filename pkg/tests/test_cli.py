import datetime as dt
import io
import json

import pytest

from conftest import make_conversation, topic_rows
from topicsuggest import checkpoint, cli
from topicsuggest import models as M
from topicsuggest.corpus import Corpus, Topic, save_corpus

SMALL = {
    "simulator": {"n_conversations": 300, "calibration_pilot": 150, "calibration_rounds": 2},
    "model": {"neural": {"emb_dim": 8, "n_filters": 4, "rnn_hidden": 5, "lstm_hidden": 6, "dense": 8,
                         "max_epochs": 1}},
    "n_resamples": 50,
    "ablation_contexts": [1],
    "ablation_groups": ["none", "all"],
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.json"
    cfg.write_text(json.dumps(SMALL))
    corpus = d / "corpus.jsonl"
    assert cli.main(["gen-corpus", "--config", str(cfg), "--out", str(corpus)]) == 0
    return d, cfg, corpus


def run(argv, capsys):
    rc = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return rc, out.out, out.err


def test_gen_corpus_is_deterministic_across_jobs(workspace, tmp_path, capsys):
    _, cfg, corpus = workspace
    other = tmp_path / "again.jsonl"
    rc, out, _ = run(["gen-corpus", "--config", cfg, "--out", other, "--jobs", 2], capsys)
    assert rc == 0 and "conversations: 300" in out
    assert other.read_bytes() == corpus.read_bytes()


def test_seed_flag_changes_corpus(workspace, tmp_path, capsys):
    _, cfg, corpus = workspace
    other = tmp_path / "seeded.jsonl"
    assert run(["gen-corpus", "--config", cfg, "--seed", 5, "--out", other], capsys)[0] == 0
    assert other.read_bytes() != corpus.read_bytes()


def test_empty_corpus(tmp_path, capsys):
    cfg = tmp_path / "empty.json"
    cfg.write_text(json.dumps({"simulator": {"n_conversations": 0}}))
    out = tmp_path / "empty.jsonl"
    rc, text, _ = run(["gen-corpus", "--config", cfg, "--out", out], capsys)
    assert rc == 0 and out.read_text() == "" and "conversations: 0" in text


@pytest.mark.parametrize("variant", ["popularity", "cts-crf"])
def test_train_eval_pipeline(variant, workspace, tmp_path, capsys):
    _, cfg, corpus = workspace
    ckpt = tmp_path / f"{variant}.ckpt"
    rc, out, _ = run(["train", "--config", cfg, "--variant", variant, "--train", corpus, "--out", ckpt], capsys)
    assert rc == 0 and f"variant: {variant}" in out and "final train loss" in out
    report = tmp_path / "report.json"
    rc, out, _ = run(["eval", ckpt, "--config", cfg, "--test", corpus, "--report", report], capsys)
    assert rc == 0 and "micro accuracy" in out
    data = json.loads(report.read_text())
    assert data["metadata"]["variant"] == variant
    for suffix in ("_table.txt", "_by_index.csv", "_acceptance.csv", "_by_index.png", "_acceptance.png"):
        assert (tmp_path / f"report{suffix}").stat().st_size > 0
    if variant == "popularity":
        assert checkpoint.read_manifest(ckpt)["arrays"] == []


def test_train_and_report_identical_across_thread_counts(workspace, tmp_path, capsys):
    _, cfg, corpus = workspace
    blobs, reports = [], []
    for threads in (1, 4):
        ckpt = tmp_path / f"t{threads}.ckpt"
        rep = tmp_path / f"t{threads}.json"
        assert run(["train", "--config", cfg, "--variant", "cts-cnn", "--train", corpus, "--out", ckpt,
                    "--threads", threads], capsys)[0] == 0
        assert run(["eval", ckpt, "--config", cfg, "--test", corpus, "--report", rep, "--threads", threads],
                   capsys)[0] == 0
        blobs.append(ckpt.read_bytes())
        reports.append(rep.read_bytes())
    assert blobs[0] == blobs[1] and reports[0] == reports[1]


def test_ablation_command(workspace, tmp_path, capsys):
    _, cfg, corpus = workspace
    out = tmp_path / "grid.json"
    rc, text, _ = run(["ablation", "--config", cfg, "--variant", "cts-crf", "--train", corpus, "--out", out], capsys)
    assert rc == 0 and "cts-crf" in text
    grid = json.loads(out.read_text())
    assert len(grid["cells"]) == 2 and out.with_suffix(".txt").exists()


def test_report_command(workspace, tmp_path, capsys):
    _, cfg, corpus = workspace
    out = tmp_path / "rep"
    rc, text, _ = run(["report", "--config", cfg, "--variant", "popularity,cf", "--train", corpus, "--out", out],
                      capsys)
    assert rc == 0 and "popularity: micro" in text
    for name in ("report.json", "table.txt", "acceptance.csv", "by_index.csv", "acceptance.png", "by_index.png"):
        assert (out / name).stat().st_size > 0
    assert set(json.loads((out / "report.json").read_text())["reports"]) == {"popularity", "cf"}


SCRIPT = [
    "Phatic: hello there",
    ":suggest",
    ":reject",
    ":rank",
    ":suggest Music",
    ":accept I love songs",
    "Music: play something",
    ":state",
    "this is not a command",
    ":quit",
    "Movie: never reached",
]


def test_repl_transcript_is_deterministic(workspace, tmp_path, capsys):
    _, cfg, corpus = workspace
    ckpt = tmp_path / "pop.ckpt"
    assert run(["train", "--config", cfg, "--variant", "popularity", "--train", corpus, "--out", ckpt], capsys)[0] == 0
    model = checkpoint.load(ckpt)
    outs = []
    for _ in range(2):
        buf = io.StringIO()
        assert cli.run_repl(model, SCRIPT, buf) == 0
        outs.append(buf.getvalue())
    assert outs[0] == outs[1]
    lines = outs[0].splitlines()
    assert "system suggests: Movie" in lines
    rankings = [ln for ln in lines if ln.startswith("ranking:")]
    # after Movie is declined it drops to the bottom
    assert rankings[2].split()[-1].startswith("Movie:")
    assert "system suggests: Music" in lines
    state = json.loads(next(ln for ln in lines if ln.startswith("{")))
    assert state["prev_accepted"] == "Music"
    assert "unrecognized input" in outs[0]
    assert not any("never reached" in ln for ln in lines)


def test_repl_accept_without_suggestion(workspace):
    trivial = [make_conversation(topic_rows([Topic.Phatic] * 4, [None] * 4))]
    model = M.train(M.ModelConfig(variant="popularity"), trivial)
    model = checkpoint.load(checkpoint.save(model, workspace[0] / "p0.ckpt"))
    buf = io.StringIO()
    cli.run_repl(model, [":accept", ":suggest Jazz"], buf)
    assert "nothing has been suggested" in buf.getvalue() and "unknown topic" in buf.getvalue()


def test_exit_codes(workspace, tmp_path, capsys):
    d, cfg, corpus = workspace
    assert run(["nonsense"], capsys)[0] == 2
    assert run(["train", "--config", cfg, "--train", corpus], capsys)[0] == 2

    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"model": {"colour": "red"}}))
    rc, _, err = run(["gen-corpus", "--config", bad_cfg, "--out", tmp_path / "x"], capsys)
    assert rc == 3 and err.startswith("error[config]") and "model.colour" in err

    rc, _, err = run(["train", "--train", tmp_path / "missing.jsonl", "--out", tmp_path / "m"], capsys)
    assert rc == 4 and "error[io]" in err
    rc, _, _ = run(["gen-corpus", "--config", cfg, "--out", tmp_path / "no" / "dir.jsonl"], capsys)
    assert rc == 4

    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"conversation_id": 1}\n')
    rc, _, err = run(["train", "--train", broken, "--out", tmp_path / "m"], capsys)
    assert rc == 5 and "line 1" in err

    junk = tmp_path / "junk.ckpt"
    junk.write_text("nope")
    assert run(["eval", junk, "--test", corpus], capsys)[0] == 6

    rc, _, err = run(["train", "--config", cfg, "--variant", "cts-gpt", "--train", corpus, "--out", tmp_path / "m"],
                     capsys)
    assert rc == 7 and "cts-gpt" in err

    ckpt = tmp_path / "pop.ckpt"
    assert run(["train", "--config", cfg, "--variant", "popularity", "--train", corpus, "--out", ckpt], capsys)[0] == 0
    late = make_conversation(topic_rows([Topic.Phatic] * 4, [None, Topic.Movie, Topic.Movie, Topic.Movie]),
                             date=dt.date(2019, 1, 1))
    no_events = tmp_path / "no_events.jsonl"
    save_corpus(Corpus((late,)), no_events)
    rc, _, err = run(["eval", ckpt, "--test", no_events], capsys)
    assert rc == 8 and "error[eval]" in err
