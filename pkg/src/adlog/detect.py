"""BLEU-1 accuracy, node tuples from predictions and collaborating-pair detection."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .ingest import SequencePair, node_of
from .seq2seq import Seq2Seq, predict, score_target

DEFAULT_K = 5


class DetectionError(ValueError):
    pass


def bleu1(predicted: Sequence, reference: Sequence, brevity_penalty: bool = True) -> float:
    """Clipped unigram precision times brevity penalty, scaled to [0, 100]."""
    if len(reference) == 0:
        raise ValueError("reference sequence is empty")
    if len(predicted) == 0:
        return 0.0
    ref_counts = Counter(reference)
    matched = sum(min(c, ref_counts[w]) for w, c in Counter(predicted).items())
    precision = matched / len(predicted)
    bp = 1.0
    if brevity_penalty and len(predicted) < len(reference):
        bp = float(np.exp(1.0 - len(reference) / len(predicted)))
    return 100.0 * precision * bp


@dataclass
class Prediction:
    tokens: list[int]
    dists: np.ndarray


def predict_pairs(model: Seq2Seq, pairs: Sequence[SequencePair], max_len: int = 100) -> list[Prediction]:
    return [Prediction(*predict(model, p.input.tokens, max_len)) for p in pairs]


@dataclass
class BleuReport:
    scores: list[float]

    @property
    def mean(self) -> float:
        return sum(self.scores) / len(self.scores)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair", "bleu1"])
        for i, s in enumerate(self.scores):
            w.writerow([i, f"{s:.6f}"])
        return buf.getvalue()


def accuracy(model: Seq2Seq, test_pairs: Sequence[SequencePair], max_len: int = 100,
             predictions: Sequence[Prediction] | None = None,
             brevity_penalty: bool = True) -> BleuReport:
    """Per-pair BLEU-1 of greedy predictions against the target sequences."""
    if len(test_pairs) == 0:
        raise DetectionError("empty test set")
    if predictions is None:
        predictions = predict_pairs(model, test_pairs, max_len)
    return BleuReport([
        bleu1(pred.tokens, pair.target.tokens, brevity_penalty)
        for pred, pair in zip(predictions, test_pairs)
    ])


@dataclass(frozen=True)
class NodeTuple:
    node: int
    actual_server: int
    predicted_server: int
    probability: float
    time: float = 0.0
    pair: int = 0

    def as_row(self) -> tuple[int, int, int]:
        return (self.node, self.actual_server, self.predicted_server)


def extract_node_tuples(model: Seq2Seq, test_pairs: Sequence[SequencePair],
                        arity: int = 6, source_position: int = 1,
                        dest_position: int = 2) -> tuple[list[NodeTuple], int]:
    """One tuple per target event: (source, actual server, predicted server).

    The target is scored under teacher forcing, so the destination slot of
    event ``e`` (token ``e*arity + dest_position``) is predicted from the true
    prefix and lines up with that event without any sequence alignment. The
    predicted server is the argmax there and its probability is the tuple's
    score. Source and actual server are the event's recorded addresses.
    Returns the tuples and the number of events skipped because the argmax
    was not a node token.
    """
    itos = model.vocab.itos
    tuples, skipped = [], 0
    for i, pair in enumerate(test_pairs):
        target = pair.target
        dists = score_target(model, pair.input.tokens, target.tokens)
        for e, (node, actual) in enumerate(target.endpoints):
            P = dists[e * arity + dest_position]
            guess = int(np.argmax(P))
            predicted = node_of(itos[guess])
            if predicted is None:
                skipped += 1
                continue
            tuples.append(NodeTuple(
                node=node, actual_server=actual, predicted_server=predicted,
                probability=float(P[guess]), time=target.times[e], pair=i,
            ))
    return tuples, skipped


def top_set(tuples: Sequence[NodeTuple], k: int = DEFAULT_K) -> list[NodeTuple]:
    """The ``k`` most probable tuples; ties go to the earlier event, then the lower node.

    Fewer than ``k`` tuples come back unchanged in ranked order.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    ranked = sorted(tuples, key=lambda t: (-t.probability, t.time, t.node))
    return ranked[:k]


def distinct_tuples(tuples: Sequence[NodeTuple]) -> list[NodeTuple]:
    """One tuple per (node, actual, predicted): its most probable occurrence.

    Ties keep the earlier event. Order follows first appearance.
    """
    best: dict[tuple[int, int, int], NodeTuple] = {}
    for t in tuples:
        cur = best.get(t.as_row())
        if cur is None or (t.probability, -t.time) > (cur.probability, -cur.time):
            best[t.as_row()] = t
    return list(best.values())


def top_sets_by_node(tuples: Sequence[NodeTuple], k: int = DEFAULT_K,
                     distinct: bool = False) -> dict[int, list[NodeTuple]]:
    """``top_set`` applied to each source node's own tuples (optionally deduplicated)."""
    if distinct:
        tuples = distinct_tuples(tuples)
    groups: dict[int, list[NodeTuple]] = {}
    for t in tuples:
        groups.setdefault(t.node, []).append(t)
    return {node: top_set(groups[node], k) for node in sorted(groups)}


def classify(A: Sequence[NodeTuple], gateway_of: Mapping[int, int]):
    """Label each tuple and collect the node pairs it implicates.

    A tuple is anomalous when the predicted server differs from the actual
    one and sits behind a different gateway than the source node. Returns
    ``(labels, flagged_pairs)`` with flagged pairs as ``(node, predicted)``.
    """
    labels, flagged = [], []
    for t in A:
        for n in (t.node, t.actual_server, t.predicted_server):
            if n not in gateway_of:
                raise DetectionError(f"node {n} has no gateway assignment")
        anomalous = (t.predicted_server != t.actual_server
                     and gateway_of[t.node] != gateway_of[t.predicted_server])
        labels.append("anomalous" if anomalous else "benign")
        pair = (t.node, t.predicted_server)
        if anomalous and pair not in flagged:
            flagged.append(pair)
    return labels, flagged


@dataclass
class ModelEvaluation:
    accuracy: float
    bleu: BleuReport
    set_A: list[NodeTuple]
    labels: list[str]
    flagged_pairs: list[tuple[int, int]]
    tuple_count: int
    skipped: int
    # k minus the size of set A when fewer than k tuples exist
    shortfall: int = 0

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "set_A": [
                {"node": t.node, "actual_server": t.actual_server,
                 "predicted_server": t.predicted_server, "probability": t.probability,
                 "time": t.time, "label": label}
                for t, label in zip(self.set_A, self.labels)
            ],
            "flagged_pairs": [list(p) for p in self.flagged_pairs],
            "tuple_count": self.tuple_count,
            "skipped": self.skipped,
            "shortfall": self.shortfall,
            "test_pairs": len(self.bleu.scores),
        }


def evaluate_model(model: Seq2Seq, test_pairs: Sequence[SequencePair],
                   gateway_of: Mapping[int, int], k: int = DEFAULT_K,
                   max_len: int = 100, arity: int = 6, source_position: int = 1,
                   dest_position: int = 2, brevity_penalty: bool = True) -> ModelEvaluation:
    """Accuracy, the global set A and the pairs flagged for one model.

    Flags come from every source node's own top-``k`` distinct tuples, each
    scored by its most confident occurrence. A node that the model sends
    across gateways is then reported even when other nodes dominate the
    global set A, or when its correct predictions repeat more often.
    """
    preds = predict_pairs(model, test_pairs, max_len)
    bleu = accuracy(model, test_pairs, predictions=preds, brevity_penalty=brevity_penalty)
    tuples, skipped = extract_node_tuples(model, test_pairs, arity, source_position, dest_position)
    A = top_set(tuples, k)
    labels, _ = classify(A, gateway_of)
    flagged: list[tuple[int, int]] = []
    for node_A in top_sets_by_node(tuples, k, distinct=True).values():
        for pair in classify(node_A, gateway_of)[1]:
            if pair not in flagged:
                flagged.append(pair)
    return ModelEvaluation(
        accuracy=bleu.mean, bleu=bleu, set_A=A, labels=labels,
        flagged_pairs=flagged, tuple_count=len(tuples), skipped=skipped,
        shortfall=max(0, k - len(A)),
    )


@dataclass
class DetectionReport:
    k: int
    attack: ModelEvaluation
    clean: ModelEvaluation
    ground_truth: tuple[int, int] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def degradation(self) -> float:
        return self.clean.accuracy - self.attack.accuracy

    @property
    def flagged_pairs(self) -> list[tuple[int, int]]:
        return self.attack.flagged_pairs

    @property
    def recall(self) -> bool | None:
        if self.ground_truth is None:
            return None
        truth = frozenset(self.ground_truth)
        return any(frozenset(p) == truth for p in self.attack.flagged_pairs)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "accuracy_with_attack": self.attack.accuracy,
            "accuracy_without_attack": self.clean.accuracy,
            "degradation": self.degradation,
            "flagged_pairs": [list(p) for p in self.flagged_pairs],
            "ground_truth": list(self.ground_truth) if self.ground_truth else None,
            "recall": self.recall,
            "attack": self.attack.to_dict(),
            "clean": self.clean.to_dict(),
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [
            f"size of set A: {self.k}",
            f"accuracy with collaborative attack: {self.attack.accuracy:.2f}",
            f"accuracy without collaborative attack: {self.clean.accuracy:.2f}",
            f"degradation (points): {self.degradation:.2f}",
            "",
            f"{'rank':>4}  {'without attack (node, actual, pred)':<38}{'with attack (node, actual, pred)':<38}",
        ]
        for i in range(self.k):
            cells = []
            for ev in (self.clean, self.attack):
                if i < len(ev.set_A):
                    t = ev.set_A[i]
                    cells.append(f"({t.node},{t.actual_server},{t.predicted_server}) "
                                 f"p={t.probability:.3f} {ev.labels[i]}")
                else:
                    cells.append("-")
            lines.append(f"{i + 1:>4}  {cells[0]:<38}{cells[1]:<38}")
        lines.append("")
        flagged = ", ".join(f"({a},{b})" for a, b in self.flagged_pairs) or "none"
        lines.append(f"flagged pairs (attack model): {flagged}")
        clean_flags = ", ".join(f"({a},{b})" for a, b in self.clean.flagged_pairs) or "none"
        lines.append(f"flagged pairs (clean model): {clean_flags}")
        if self.ground_truth is not None:
            a, b = self.ground_truth
            lines.append(f"ground truth pair ({a},{b}) flagged: {'yes' if self.recall else 'no'}")
        return "\n".join(lines) + "\n"


def compare_models(model_attack: Seq2Seq, model_clean: Seq2Seq,
                   test_attack: Sequence[SequencePair], test_clean: Sequence[SequencePair],
                   gateway_of: Mapping[int, int], k: int = DEFAULT_K,
                   ground_truth: tuple[int, int] | None = None, max_len: int = 100,
                   arity: int = 6, source_position: int = 1,
                   dest_position: int = 2) -> DetectionReport:
    if model_attack.vocab != model_clean.vocab:
        raise DetectionError("the two models were trained on different vocabularies")
    kw = dict(k=k, max_len=max_len, arity=arity, source_position=source_position,
              dest_position=dest_position)
    return DetectionReport(
        k=k,
        attack=evaluate_model(model_attack, test_attack, gateway_of, **kw),
        clean=evaluate_model(model_clean, test_clean, gateway_of, **kw),
        ground_truth=ground_truth,
    )
