"""Command-line entry point.

    topicsuggest gen-corpus --out corpus.jsonl [--config run.json] [--seed N]
    topicsuggest train --variant cts-crf --train corpus.jsonl --out model.zip
    topicsuggest eval model.zip --test corpus.jsonl --report report.json
    topicsuggest ablation --variant cts-rnn --train corpus.jsonl --out grid.json
    topicsuggest report --train corpus.jsonl --out results/
    topicsuggest suggest model.zip

Corpus files passed to ``--train`` / ``--test`` are split by date according
to ``train_days``; training reads only the early part and evaluation only
the late part. Failures print one line ``error[<category>]: <message>`` to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import checkpoint, evaluation, models, plotting, simulator
from .config import ConfigError, RunConfig
from .corpus import SUGGESTIBLE, Corpus, CorpusError, Topic, load_corpus, save_corpus, split_by_date
from .features import extract_state_features

log = logging.getLogger("topicsuggest")

EXIT_CODES = {"usage": 2, "config": 3, "io": 4, "corpus": 5, "checkpoint": 6, "model": 7, "eval": 8}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ----------------------------------------------------------------------
# shared helpers

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    if getattr(args, "variant", None) and args.command in ("train", "ablation"):
        if args.command == "train":
            if args.variant not in models.VARIANTS:
                raise CliError("model", f"unknown variant {args.variant!r}; choose from {', '.join(models.VARIANTS)}")
            cfg.model.variant = args.variant
        else:
            cfg.ablation_variant = args.variant
    return cfg


def _read_corpus(path) -> Corpus:
    if path is None:
        raise CliError("usage", "a corpus path is required")
    try:
        return load_corpus(path)
    except FileNotFoundError:
        raise CliError("io", f"corpus not found: {path}") from None
    except CorpusError as exc:
        raise CliError("corpus", f"{path}: {exc}") from None


def _split(cfg: RunConfig, corpus: Corpus) -> tuple[Corpus, Corpus]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return split_by_date(corpus, simulator.cutoff_date(cfg.simulator, cfg.train_days))


def _writable(path) -> Path:
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise CliError("io", f"directory does not exist: {path.parent}")
    return path


def _write_text(path, text: str):
    try:
        _writable(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError("io", f"cannot write {path}: {exc.strerror}") from None


def _topic_line(dist: dict) -> str:
    return ", ".join(f"{k}={v:.3f}" for k, v in dist.items())


# ----------------------------------------------------------------------
# commands

def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    if not args.out:
        raise CliError("usage", "--out is required")
    out = _writable(args.out)
    corpus = simulator.generate_corpus(cfg.simulator, jobs=cfg.jobs)
    try:
        save_corpus(corpus, out)
    except OSError as exc:
        raise CliError("io", f"cannot write {out}: {exc.strerror}") from None
    n = len(corpus)
    mean_len = float(np.mean([len(c) for c in corpus])) if n else 0.0
    print(f"conversations: {n}")
    print(f"mean turns: {mean_len:.2f}")
    if n:
        dist = corpus.topic_distribution
        print("topic distribution: " + _topic_line({t.name: dist.get(t, 0.0) for t in SUGGESTIBLE}))
    print(f"digest: {corpus.digest()}")
    return 0


def _final_loss(model: models.TrainedModel):
    if not model.history:
        return None
    last = model.history[-1]
    for key in ("train_loss", "objective"):
        if key in last:
            return last[key]
    return None


def cmd_train(args, cfg: RunConfig) -> int:
    if not args.out:
        raise CliError("usage", "--out is required")
    train_split, _ = _split(cfg, _read_corpus(args.train))
    try:
        model = models.train(cfg.model, train_split)
    except models.ModelError as exc:
        raise CliError("model", str(exc)) from None
    try:
        checkpoint.save(model, _writable(args.out))
    except OSError as exc:
        raise CliError("io", f"cannot write {args.out}: {exc.strerror}") from None
    loss = _final_loss(model)
    print(f"variant: {model.variant}")
    print(f"training conversations: {len(train_split)}")
    print("final train loss: " + ("n/a (no parameters)" if loss is None else f"{loss:.6f}"))
    print(f"checkpoint: {args.out}")
    return 0


def _load_model(path, variant=None) -> models.TrainedModel:
    if path is None:
        raise CliError("usage", "a checkpoint path is required")
    try:
        return checkpoint.load(path, variant)
    except FileNotFoundError:
        raise CliError("io", f"checkpoint not found: {path}") from None
    except (checkpoint.CheckpointError, ConfigError, KeyError) as exc:
        raise CliError("checkpoint", f"{path}: {exc}") from None


def _report_siblings(report: Path) -> dict:
    stem = report.with_suffix("")
    return {
        "text": stem.with_name(stem.name + "_table.txt"),
        "curve_csv": stem.with_name(stem.name + "_by_index.csv"),
        "acceptance_csv": stem.with_name(stem.name + "_acceptance.csv"),
        "curve_png": stem.with_name(stem.name + "_by_index.png"),
        "acceptance_png": stem.with_name(stem.name + "_acceptance.png"),
    }


def _write_report_files(report: evaluation.EvalReport, path: Path):
    _write_text(path, report.to_json())
    side = _report_siblings(path)
    _write_text(side["text"], report.to_text())
    _write_text(side["curve_csv"], report.curve_csv())
    _write_text(side["acceptance_csv"], report.acceptance_csv())
    plotting.plot_accuracy_by_index({report.metadata.get("variant", "model"): report.by_suggestion_index},
                                    side["curve_png"])
    plotting.plot_acceptance_rates(report.acceptance_rate, side["acceptance_png"])


def cmd_eval(args, cfg: RunConfig) -> int:
    model = _load_model(args.checkpoint, args.variant)
    _, test_split = _split(cfg, _read_corpus(args.test))
    try:
        report = evaluation.evaluate(model, test_split)
    except evaluation.EvalError as exc:
        raise CliError("eval", str(exc)) from None
    if args.report:
        _write_report_files(report, _writable(args.report))
    print(f"variant: {model.variant}")
    print(f"events: {report.n_events}")
    print(f"micro accuracy: {report.micro_accuracy:.4f}")
    print(f"macro accuracy: {report.macro_accuracy:.4f}")
    return 0


def cmd_ablation(args, cfg: RunConfig) -> int:
    if not args.out:
        raise CliError("usage", "--out is required")
    out = _writable(args.out)
    train_split, test_split = _split(cfg, _read_corpus(args.train))
    if args.test:
        _, test_split = _split(cfg, _read_corpus(args.test))
    try:
        grid = evaluation.run_ablation(cfg.model, train_split, test_split, cfg.ablation_variant,
                                       cfg.ablation_contexts, cfg.ablation_groups, cfg.n_resamples, cfg.model.seed)
    except (models.ModelError, evaluation.EvalError) as exc:
        raise CliError("eval", str(exc)) from None
    _write_text(out, grid.to_json())
    text = grid.to_text()
    _write_text(out.with_suffix(".txt"), text)
    print(text, end="")
    failed = [c.key for c in grid.cells if c.error]
    if failed:
        print(f"failed cells: {', '.join(failed)}", file=sys.stderr)
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    """Train every requested variant, evaluate on the test split, write tables and figures."""
    if not args.out:
        raise CliError("usage", "--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"cannot create {out}: {exc.strerror}") from None
    train_split, test_split = _split(cfg, _read_corpus(args.train))
    if args.test:
        _, test_split = _split(cfg, _read_corpus(args.test))
    variants = args.variant.split(",") if args.variant else [v for v in models.VARIANTS if v != "oracle"]
    unknown = [v for v in variants if v not in models.VARIANTS]
    if unknown:
        raise CliError("model", f"unknown variant {unknown[0]!r}")
    data = models.TrainingData(train_split, cfg.model.k_neighbors)
    reports = {}
    for v in variants:
        mc = RunConfig.from_dict({"model": cfg.to_dict()["model"]}).model
        mc.variant = v
        try:
            model = models.train(mc, data)
            reports[v] = evaluation.evaluate(model, test_split)
        except (models.ModelError, evaluation.EvalError) as exc:
            raise CliError("model", f"{v}: {exc}") from None
        print(f"{v}: micro {reports[v].micro_accuracy:.4f} macro {reports[v].macro_accuracy:.4f}")
    summary = {"schema": "comparison-1", "reports": {v: r.to_dict() for v, r in reports.items()}}
    _write_text(out / "report.json", json.dumps(summary, indent=2) + "\n")
    _write_text(out / "table.txt", evaluation.comparison_table(reports))
    first = next(iter(reports.values()))
    _write_text(out / "acceptance.csv", first.acceptance_csv())
    rows = ["variant,index,n_events,accuracy"]
    for v, r in reports.items():
        rows += [f"{v},{p['index']},{p['n_events']},{p['accuracy']:.6f}" for p in r.by_suggestion_index]
    _write_text(out / "by_index.csv", "\n".join(rows) + "\n")
    plotting.plot_acceptance_rates(first.acceptance_rate, out / "acceptance.png")
    plotting.plot_accuracy_by_index({v: r.by_suggestion_index for v, r in reports.items()}, out / "by_index.png")
    print(f"report written to {out}")
    return 0


# ----------------------------------------------------------------------
# interactive session

REPL_HELP = """commands:
  <Topic>: <utterance>   add a user turn on a topic, e.g. "Movie: seen any good films"
  :suggest [Topic]       offer the top-ranked topic (or the named one) to the user
  :accept [utterance]    the user takes up the pending suggestion
  :reject [utterance]    the user declines the pending suggestion
  :rank                  print the current ranking
  :state                 print the dialogue-state features
  :help                  this text
  :quit                  leave
topics: """ + ", ".join(t.name for t in Topic)


def _print_ranking(model, session, out):
    ranking = models.suggest(model, session)
    print("ranking: " + " ".join(f"{t.name}:{p:.3f}" for t, p in ranking), file=out)
    return ranking


def run_repl(model: models.TrainedModel, lines, out=sys.stdout) -> int:
    session = models.Session()
    ranking = _print_ranking(model, session, out)
    for raw in lines:
        line = raw.strip()
        if not line:
            continue
        cmd, _, rest = line.partition(" ")
        rest = rest.strip()
        if cmd == ":quit":
            break
        if cmd == ":help":
            print(REPL_HELP, file=out)
            continue
        if cmd == ":rank":
            ranking = _print_ranking(model, session, out)
            continue
        if cmd == ":state":
            conv = session.conversation()
            state = extract_state_features(conv, len(conv) + 1)
            print(json.dumps(state.describe(), sort_keys=True), file=out)
            continue
        if cmd == ":suggest":
            try:
                topic = Topic[rest] if rest else ranking[0][0]
            except KeyError:
                print(f"unknown topic {rest!r}\n" + REPL_HELP, file=out)
                continue
            session.last_suggested = topic
            print(f"system suggests: {topic.name}", file=out)
            continue
        if cmd in (":accept", ":reject"):
            pending = session.last_suggested
            if pending is None:
                print("nothing has been suggested yet\n" + REPL_HELP, file=out)
                continue
            if cmd == ":accept":
                session.add_user_turn(rest or f"sure, let's talk about {pending.name}", pending)
            else:
                session.add_user_turn(rest or "no thanks", Topic.Phatic)
            ranking = _print_ranking(model, session, out)
            continue
        name, sep, utterance = line.partition(":")
        if sep and name.strip() in Topic.__members__ and not line.startswith(":"):
            session.add_user_turn(utterance.strip(), Topic[name.strip()])
            ranking = _print_ranking(model, session, out)
            continue
        print(f"unrecognized input {line!r}\n" + REPL_HELP, file=out)
    return 0


def cmd_suggest(args, cfg: RunConfig) -> int:
    model = _load_model(args.checkpoint, args.variant)
    if sys.stdin.isatty():
        print(REPL_HELP)
    return run_repl(model, sys.stdin)


# ----------------------------------------------------------------------
# entry point

COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
    "report": cmd_report,
    "suggest": cmd_suggest,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="topicsuggest", description="Conversational topic suggestion toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run config")
        s.add_argument("--seed", type=int, help="overrides the simulator and model seeds")
        s.add_argument("--variant", help="model variant (comma-separated list for report)")
        s.add_argument("--train", help="corpus file for training (its early split is used)")
        s.add_argument("--test", help="corpus file for evaluation (its late split is used)")
        s.add_argument("--out", help="output file or directory")
        s.add_argument("--report", help="JSON report path; tables, CSV and PNG figures go alongside")
        s.add_argument("--threads", type=int, help="BLAS thread count")
        s.add_argument("--jobs", type=int, help="simulator worker processes")
        if name in ("eval", "suggest"):
            s.add_argument("checkpoint", nargs="?")
    return p


def _blas_limit(threads):
    if threads is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config(args)
        if args.jobs is not None:
            cfg.jobs = args.jobs
        if args.threads is not None:
            cfg.threads = args.threads
        with _blas_limit(cfg.threads):
            return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error[{exc.category}]: {msg}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    except models.ModelError as exc:
        print(f"error[model]: {exc}", file=sys.stderr)
        return EXIT_CODES["model"]


if __name__ == "__main__":
    sys.exit(main())
