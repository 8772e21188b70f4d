"""End-to-end experiment: simulate, prepare, train both models, detect.

Each seed runs an independent clean/attack pair of scenarios. Every trace's
pairs are split into train and test parts on their own. The attack model
trains on the training parts of both traces combined and is tested on the
attack trace; the clean model trains and is tested on the clean trace alone.
Both share the vocabulary of the combined traces.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import platform
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from . import __version__
from .checkpoint import save as save_checkpoint
from .detect import DEFAULT_K, DetectionReport, compare_models
from .ingest import Corpus, FieldTokenizer, dumps_corpus, prepare_corpus, split_by_trace
from .seq2seq import Seq2Seq
from .trace import TraceEvent, format_trace
from .tracesim import ScenarioConfig, TraceLog, build_topology, default_scenario, simulate
from .train import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

PROFILES: dict[str, dict[str, Any]] = {
    "desk": {
        "scenario": {"duration": 6.0},
        "ingest": {"max_len": 100, "seq_bucket": None},
        # full teacher forcing and a linear decay: with teacher_forcing_p 0.5 the
        # short run never learns which trace it is reading; at 2000 steps greedy
        # decoding quality varies by seed more than the attack costs in BLEU
        "train": {"hidden_size": 64, "iterations": 4000, "lr_start": 0.01, "lr_end": 0.001,
                  "lr_schedule": "linear", "teacher_forcing_p": 1.0},
        "eval": {"k": DEFAULT_K, "test_fraction": 0.1, "seeds": [1, 2, 3]},
    },
    "paper": {
        "scenario": {"duration": 50.0},
        "ingest": {"max_len": 100, "seq_bucket": None},
        "train": {"hidden_size": 256, "iterations": 70_000, "lr_start": 0.01, "lr_end": 0.0001},
        "eval": {"k": DEFAULT_K, "test_fraction": 0.1, "seeds": [1, 2, 3]},
    },
}


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    scenario: dict = field(default_factory=dict)
    ingest: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    out: str = "runs"
    profile: str = "desk"

    @classmethod
    def build(cls, profile: str = "desk", overrides: Mapping | None = None) -> "ExperimentConfig":
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        data = _merge(PROFILES[profile], overrides or {})
        data.pop("profile", None)
        cfg = cls(profile=profile, **{k: v for k, v in data.items() if k != "out"})
        if "out" in data:
            cfg.out = str(data["out"])
        if not cfg.seeds:
            raise ValueError("eval.seeds must not be empty")
        return cfg

    @classmethod
    def from_file(cls, path, profile: str | None = None) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        return cls.build(profile or data.pop("profile", "desk"), data)

    @property
    def seeds(self) -> list[int]:
        return list(self.eval.get("seeds", []))

    @property
    def k(self) -> int:
        return int(self.eval.get("k", DEFAULT_K))

    @property
    def test_fraction(self) -> float:
        return float(self.eval.get("test_fraction", 0.1))

    @property
    def max_len(self) -> int:
        return int(self.ingest.get("max_len", 100))

    def tokenizer(self) -> FieldTokenizer:
        return FieldTokenizer(seq_bucket=self.ingest.get("seq_bucket"))

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed, "max_len": self.max_len})

    def scenario_config(self, seed: int, attack: bool) -> ScenarioConfig:
        """The configured scenario, or the default 16-node network when no flows are given."""
        sc = dict(self.scenario)
        if sc.get("flows"):
            cfg = ScenarioConfig.from_dict({k: v for k, v in sc.items() if k != "hidden_pair"})
            pair = sc.get("hidden_pair", [14, 15])
            cfg.hidden_pair = tuple(pair) if attack and pair else None
        else:
            cfg = default_scenario(float(sc.get("duration", 1.0)), attack=attack,
                                   jitter=float(sc.get("jitter", 0.01)))
        cfg.seed = seed
        cfg.duration = float(sc.get("duration", cfg.duration))
        return cfg

    def to_dict(self) -> dict:
        return {"profile": self.profile, "scenario": self.scenario, "ingest": self.ingest,
                "train": self.train, "eval": self.eval, "out": self.out}


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest(config: ExperimentConfig, **extra) -> dict:
    return {
        "adlog_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": config.to_dict(),
        **extra,
    }


def write_manifest(path, config: ExperimentConfig, **extra) -> None:
    atomic_write_text(path, json.dumps(manifest(config, **extra), indent=2, sort_keys=True) + "\n")


def simulate_pair(config: ExperimentConfig, seed: int) -> tuple[TraceLog, TraceLog]:
    logs = []
    for attack in (False, True):
        sc = config.scenario_config(seed, attack)
        logs.append(simulate(build_topology(sc), sc.seed, sc.duration))
    return logs[0], logs[1]


def gateway_map(config: ExperimentConfig, seed: int = 0) -> dict[int, int]:
    return build_topology(config.scenario_config(seed, attack=False)).gateway_of


def prepare_pair(config: ExperimentConfig, clean: list[TraceEvent],
                 attack: list[TraceEvent]) -> tuple[Corpus, Corpus]:
    """(attack corpus over both traces, clean corpus) with one shared vocabulary."""
    tok = config.tokenizer()
    attack_corpus = prepare_corpus([clean, attack], config.max_len, tok)
    clean_corpus = prepare_corpus([clean], config.max_len, tok, vocab=attack_corpus.vocab)
    return attack_corpus, clean_corpus


def loss_csv(history) -> str:
    return "iteration,mean_nll\n" + "".join(f"{i},{v:.6f}\n" for i, v in history)


@dataclass
class SeedResult:
    seed: int
    report: DetectionReport
    attack_train: TrainResult
    clean_train: TrainResult


def run_seed(config: ExperimentConfig, seed: int, out_dir: Path | None = None) -> SeedResult:
    clean_log, attack_log = simulate_pair(config, seed)
    attack_corpus, clean_corpus = prepare_pair(config, clean_log.events, attack_log.events)
    attack_train, attack_tests = split_by_trace(attack_corpus, config.test_fraction, seed)
    clean_train, clean_tests = split_by_trace(clean_corpus, config.test_fraction, seed)
    attack_test, clean_test = attack_tests[-1], clean_tests[-1]
    tc = config.train_config(seed)
    vocab = attack_corpus.vocab
    log.info("seed %d: vocabulary %d, attack pairs %d, clean pairs %d",
             seed, len(vocab), len(attack_corpus.pair_index), len(clean_corpus.pair_index))
    res_attack = train(attack_train, len(vocab), tc)
    res_clean = train(clean_train, len(vocab), tc)
    model_attack = Seq2Seq(res_attack.params, vocab)
    model_clean = Seq2Seq(res_clean.params, vocab)
    truth = attack_log.ground_truth.pair if attack_log.ground_truth else None
    report = compare_models(model_attack, model_clean, attack_test, clean_test,
                            gateway_map(config, seed), k=config.k, ground_truth=truth,
                            max_len=config.max_len)
    report.extra["seed"] = seed
    if out_dir is not None:
        d = Path(out_dir) / f"seed_{seed}"
        atomic_write_text(d / "clean.tr", format_trace(clean_log.events))
        atomic_write_text(d / "attack.tr", format_trace(attack_log.events))
        atomic_write_text(d / "attack.truth.json",
                          json.dumps({"hidden_pair": list(truth) if truth else None}) + "\n")
        atomic_write_text(d / "attack.corpus", dumps_corpus(attack_corpus))
        atomic_write_text(d / "clean.corpus", dumps_corpus(clean_corpus))
        for name, res, model in (("attack", res_attack, model_attack),
                                 ("clean", res_clean, model_clean)):
            save_checkpoint(model, d / f"{name}.ckpt",
                            {"train_config": tc.to_dict(), "state": res.state.to_dict()})
            atomic_write_text(d / f"{name}.loss.csv", loss_csv(res.history))
        atomic_write_text(d / "bleu_attack.csv", report.attack.bleu.to_csv())
        atomic_write_text(d / "bleu_clean.csv", report.clean.bleu.to_csv())
        atomic_write_text(d / "report.txt", report.to_text())
        atomic_write_text(d / "report.json", report.to_json())
        write_manifest(d / "manifest.json", config, seed=seed, train_config=tc.to_dict())
    return SeedResult(seed, report, res_attack, res_clean)


@dataclass
class ExperimentSummary:
    results: list[SeedResult]

    def to_dict(self) -> dict:
        att = [r.report.attack.accuracy for r in self.results]
        cln = [r.report.clean.accuracy for r in self.results]
        return {
            "seeds": [r.seed for r in self.results],
            "accuracy_with_attack": att,
            "accuracy_without_attack": cln,
            "accuracy_with_attack_range": [min(att), max(att)],
            "accuracy_without_attack_range": [min(cln), max(cln)],
            "mean_degradation": float(np.mean(cln) - np.mean(att)),
            "recall": [r.report.recall for r in self.results],
            "flagged_pairs": [[list(p) for p in r.report.flagged_pairs] for r in self.results],
        }

    def to_text(self) -> str:
        d = self.to_dict()
        lines = []
        for r in self.results:
            lines.append(f"== seed {r.seed}")
            lines.append(r.report.to_text())
        lines.append("== summary")
        lines.append("accuracy with attack: " + ", ".join(f"{a:.2f}" for a in d["accuracy_with_attack"])
                     + f"  (range {d['accuracy_with_attack_range'][0]:.2f}-{d['accuracy_with_attack_range'][1]:.2f})")
        lines.append("accuracy without attack: " + ", ".join(f"{a:.2f}" for a in d["accuracy_without_attack"])
                     + f"  (range {d['accuracy_without_attack_range'][0]:.2f}-{d['accuracy_without_attack_range'][1]:.2f})")
        lines.append(f"mean degradation (points): {d['mean_degradation']:.2f}")
        hits = sum(bool(x) for x in d["recall"])
        lines.append(f"hidden pair flagged in {hits} of {len(d['recall'])} seeds")
        return "\n".join(lines) + "\n"


def run_experiment(config: ExperimentConfig, out_dir=None,
                   seeds: list[int] | None = None) -> ExperimentSummary:
    results = [run_seed(config, s, out_dir) for s in (seeds or config.seeds)]
    summary = ExperimentSummary(results)
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / "summary.txt", summary.to_text())
        atomic_write_text(Path(out_dir) / "summary.json",
                          json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
        write_manifest(Path(out_dir) / "manifest.json", config, seeds=[r.seed for r in results])
    return summary
