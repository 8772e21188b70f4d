"""Command line entry point: ``adlog simulate|prepare|train|evaluate|detect|run``.

Every command takes ``--config``, ``--profile``, ``--seed`` and ``--out``.
Files are written to a temporary sibling and renamed into place, and each
output directory gets a ``manifest.json`` describing how it was produced.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .detect import DetectionError, compare_models, evaluate_model
from .ingest import CorpusFormatError, dumps_corpus, load_corpus, prepare_corpus, split_by_trace
from .pipeline import (
    PROFILES, ExperimentConfig, atomic_write_text, gateway_map, loss_csv, run_experiment,
    write_manifest,
)
from .seq2seq import ModelError, Seq2Seq
from .trace import TraceParseError, format_trace, read_trace
from .tracesim import ScenarioError, SimulationError, build_topology, simulate
from .train import TrainConfig, TrainingError, TrainState, train

log = logging.getLogger("adlog")


class UsageError(ValueError):
    pass


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, args.profile)
    else:
        cfg = ExperimentConfig.build(args.profile or "desk")
    if args.out:
        cfg.out = args.out
    return cfg


def _seed(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def cmd_simulate(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    out = Path(cfg.out)
    truth = None
    for name, attack in (("clean", False), ("attack", True)):
        sc = cfg.scenario_config(seed, attack)
        if sc.duration <= 0:
            log.warning("duration is %s; %s trace will be empty", sc.duration, name)
        result = simulate(build_topology(sc), sc.seed, sc.duration)
        atomic_write_text(out / f"{name}.tr", format_trace(result.events))
        print(f"{name}: {len(result.events)} events -> {out / f'{name}.tr'}")
        if attack and result.ground_truth is not None:
            truth = list(result.ground_truth.pair)
    atomic_write_text(out / "attack.truth.json", json.dumps({"hidden_pair": truth}) + "\n")
    write_manifest(out / "manifest.json", cfg, command="simulate", seed=seed)
    return 0


def cmd_prepare(args) -> int:
    cfg = _config(args)
    if not args.trace:
        raise UsageError("prepare needs at least one --trace")
    traces = []
    for path in args.trace:
        try:
            traces.append(read_trace(path))
        except TraceParseError as exc:
            raise TraceParseError(f"{path}: {exc.message}", exc.column, exc.line_no) from None
    vocab = load_corpus(args.vocab_from).vocab if args.vocab_from else None
    corpus = prepare_corpus(traces, cfg.max_len, cfg.tokenizer(), vocab=vocab)
    path = Path(cfg.out) / f"{args.name}.corpus"
    atomic_write_text(path, dumps_corpus(corpus))
    write_manifest(Path(cfg.out) / f"{args.name}.corpus.manifest.json", cfg, command="prepare",
                   traces=[str(t) for t in args.trace], vocab_from=args.vocab_from)
    print(f"vocabulary size: {len(corpus.vocab)}")
    print(f"sequence pairs: {len(corpus.pair_index)}")
    print(f"corpus -> {path}")
    return 0


def _split(cfg: ExperimentConfig, corpus_path, seed: int, test_trace: int = -1):
    """Pooled training pairs and the test pairs of one trace (the last by default)."""
    corpus = load_corpus(corpus_path)
    train_pairs, tests = split_by_trace(corpus, cfg.test_fraction, seed)
    if not tests:
        raise UsageError(f"{corpus_path} holds no sequence pairs")
    try:
        test_pairs = tests[test_trace]
    except IndexError:
        raise UsageError(f"{corpus_path} has {len(tests)} trace(s); no trace {test_trace}") from None
    return corpus, train_pairs, test_pairs


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    corpus, train_pairs, _ = _split(cfg, args.corpus, seed)
    params = state = None
    if args.resume:
        model, meta = load_checkpoint(args.resume)
        if model.vocab != corpus.vocab:
            raise UsageError("checkpoint vocabulary does not match the corpus")
        tc = TrainConfig(**meta["train_config"])
        params, state = model.params, TrainState.from_dict(meta["state"])
        log.info("resuming at iteration %d of %d", state.iteration, tc.iterations)
    else:
        tc = cfg.train_config(seed)
    if args.iterations is not None:
        tc.iterations = args.iterations
    result = train(train_pairs, len(corpus.vocab), tc, params=params, state=state,
                   stop_at=args.stop_at)
    out = Path(cfg.out)
    model = Seq2Seq(result.params, corpus.vocab)
    save_checkpoint(model, out / f"{args.name}.ckpt",
                    {"train_config": tc.to_dict(), "state": result.state.to_dict()})
    atomic_write_text(out / f"{args.name}.loss.csv", loss_csv(result.history))
    write_manifest(out / f"{args.name}.ckpt.manifest.json", cfg, command="train", seed=seed,
                   corpus=str(args.corpus), train_config=tc.to_dict(),
                   resumed_from=args.resume)
    last = result.history[-1][1] if result.history else float("nan")
    print(f"trained {result.state.iteration} iterations, last mean nll {last:.4f}")
    print(f"checkpoint -> {out / f'{args.name}.ckpt'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    model, _ = load_checkpoint(args.checkpoint)
    corpus, _, test_pairs = _split(cfg, args.corpus, seed, args.test_trace)
    if model.vocab != corpus.vocab:
        raise UsageError("checkpoint vocabulary does not match the corpus")
    ev = evaluate_model(model, test_pairs, gateway_map(cfg, seed), k=cfg.k, max_len=cfg.max_len)
    out = Path(cfg.out)
    atomic_write_text(out / f"{args.name}.bleu.csv", ev.bleu.to_csv())
    atomic_write_text(out / f"{args.name}.eval.json",
                      json.dumps(ev.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"accuracy (mean BLEU-1 over {len(test_pairs)} test pairs): {ev.accuracy:.2f}")
    for t, label in zip(ev.set_A, ev.labels):
        print(f"({t.node},{t.actual_server},{t.predicted_server}) p={t.probability:.3f} {label}")
    return 0


def cmd_detect(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    model_attack, _ = load_checkpoint(args.attack_checkpoint)
    model_clean, _ = load_checkpoint(args.clean_checkpoint)
    _, _, test_attack = _split(cfg, args.attack_corpus, seed)
    _, _, test_clean = _split(cfg, args.clean_corpus, seed)
    truth = None
    if args.truth:
        pair = json.loads(Path(args.truth).read_text(encoding="utf-8")).get("hidden_pair")
        truth = tuple(pair) if pair else None
    report = compare_models(model_attack, model_clean, test_attack, test_clean,
                            gateway_map(cfg, seed), k=cfg.k, ground_truth=truth,
                            max_len=cfg.max_len)
    out = Path(cfg.out)
    atomic_write_text(out / "report.txt", report.to_text())
    atomic_write_text(out / "report.json", report.to_json())
    atomic_write_text(out / "bleu_attack.csv", report.attack.bleu.to_csv())
    atomic_write_text(out / "bleu_clean.csv", report.clean.bleu.to_csv())
    write_manifest(out / "report.manifest.json", cfg, command="detect", seed=seed)
    print(report.to_text(), end="")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    summary = run_experiment(cfg, Path(cfg.out), seeds)
    print(summary.to_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--profile", choices=sorted(PROFILES), default=None,
                        help="base profile (default: desk, or the config's own)")
    common.add_argument("--seed", type=int, default=None,
                        help="scenario/split/training seed (default: first configured seed)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="adlog", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write clean and attack traces")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("prepare", parents=[common], help="traces -> corpus file")
    p.add_argument("--trace", action="append", default=[], help="trace file (repeatable)")
    p.add_argument("--vocab-from", help="reuse the vocabulary of this corpus")
    p.add_argument("--name", default="corpus", help="output basename")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="corpus -> checkpoint and loss CSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--iterations", type=int, default=None, help="override the iteration count")
    p.add_argument("--stop-at", type=int, default=None,
                   help="pause after this many iterations; --resume continues the same run")
    p.add_argument("--name", default="model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="BLEU-1 accuracy and set A of one model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--test-trace", type=int, default=-1,
                   help="trace whose test pairs are scored (default: the last one)")
    p.add_argument("--name", default="model")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("detect", parents=[common], help="compare attack and clean models")
    p.add_argument("--attack-checkpoint", required=True)
    p.add_argument("--clean-checkpoint", required=True)
    p.add_argument("--attack-corpus", required=True)
    p.add_argument("--clean-corpus", required=True)
    p.add_argument("--truth", help="ground-truth sidecar written by simulate")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("run", parents=[common], help="full pipeline over the configured seeds")
    p.set_defaults(func=cmd_run)
    return parser


_ERRORS = (TraceParseError, CorpusFormatError, CheckpointError, ScenarioError, SimulationError,
           TrainingError, ModelError, DetectionError, UsageError, ValueError, KeyError, OSError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"adlog {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
