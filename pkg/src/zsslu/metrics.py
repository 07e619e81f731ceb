"""WER, intent accuracy, entity F1 variants, SLU-F1 and perfect parsing."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .kernels import edit_distance
from .model import tokenize

MODES = ("exact", "word", "char")


def wer(reference, hypothesis) -> float:
    ref = tokenize(reference) if isinstance(reference, str) else list(reference)
    hyp = tokenize(hypothesis) if isinstance(hypothesis, str) else list(hypothesis)
    if not ref:
        raise ValueError("WER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(references, hypotheses) -> float:
    """Total word edits over total reference words."""
    edits = words = 0
    for r, h in zip(references, hypotheses, strict=True):
        ref, hyp = tokenize(r), tokenize(h)
        edits += edit_distance(ref, hyp)
        words += len(ref)
    if words == 0:
        raise ValueError("WER is undefined for empty references")
    return edits / words


def credit(gold: str, pred: str, mode: str) -> float:
    if mode == "exact":
        return 1.0 if gold == pred else 0.0
    if mode == "word":
        a, b = tokenize(gold), tokenize(pred)
    elif mode == "char":
        a, b = gold, pred
    else:
        raise ValueError(f"unknown mode {mode!r}")
    n = max(len(a), len(b))
    if n == 0:
        return 1.0
    return max(0.0, 1.0 - edit_distance(a, b) / n)


def matched_credit(gold, pred, mode: str) -> float:
    """Best one-to-one total credit, pairing entities of the same slot type only."""
    total = 0.0
    for slot in {s for s, _ in gold} & {s for s, _ in pred}:
        g = [v for s, v in gold if s == slot]
        p = [v for s, v in pred if s == slot]
        w = np.array([[credit(a, b, mode) for b in p] for a in g])
        rows, cols = linear_sum_assignment(w, maximize=True)
        total += float(w[rows, cols].sum())
    return total


def _prf(c: float, n_gold: int, n_pred: int) -> tuple[float, float, float]:
    if n_gold == 0 and n_pred == 0:
        return 1.0, 1.0, 1.0
    if n_gold == 0 or n_pred == 0:
        return 0.0, 0.0, 0.0
    p, r = c / n_pred, c / n_gold
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def entity_f1(gold, pred, mode: str = "exact") -> tuple[float, float, float]:
    gold, pred = [tuple(e[:2]) for e in gold], [tuple(e[:2]) for e in pred]
    return _prf(matched_credit(gold, pred, mode), len(gold), len(pred))


def corpus_entity_f1(golds, preds, mode: str = "exact") -> tuple[float, float, float]:
    """Micro-averaged over utterances."""
    c = ng = np_ = 0
    for g, p in zip(golds, preds, strict=True):
        g, p = [tuple(e[:2]) for e in g], [tuple(e[:2]) for e in p]
        c += matched_credit(g, p, mode)
        ng += len(g)
        np_ += len(p)
    return _prf(c, ng, np_)


def harmonic(a: float, b: float) -> float:
    return 0.0 if a == 0 or b == 0 else 2 * a * b / (a + b)


def slu_f1(golds, preds) -> float:
    """Harmonic mean of word-level and char-level entity F1 (corpus level)."""
    if golds and not isinstance(golds[0], list):
        golds, preds = [golds], [preds]
    return harmonic(corpus_entity_f1(golds, preds, "word")[2], corpus_entity_f1(golds, preds, "char")[2])


def perfect_parsing(gold_intents, gold_entities, pred_intents, pred_entities) -> float:
    n = len(gold_intents)
    if n == 0:
        raise ValueError("no utterances")
    ok = 0
    for gi, ge, pi, pe in zip(gold_intents, gold_entities, pred_intents, pred_entities, strict=True):
        ok += gi == pi and Counter(tuple(e[:2]) for e in ge) == Counter(tuple(e[:2]) for e in pe)
    return ok / n


def intent_accuracy(golds, preds) -> float:
    if len(golds) != len(preds):
        raise ValueError(f"length mismatch: {len(golds)} gold vs {len(preds)} predicted intents")
    if not golds:
        raise ValueError("no utterances")
    return sum(g == p for g, p in zip(golds, preds)) / len(golds)


@dataclass
class EvalReport:
    wer: float
    intent_accuracy: float
    f1_exact: float
    f1_word: float
    f1_char: float
    slu_f1: float
    perfect_parsing: float
    n_utterances: int
    n_gold_entities: int
    n_pred_entities: int

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def table_row(self) -> dict:
        return {"WER": round(100 * self.wer, 1), "Acc.": round(100 * self.intent_accuracy, 1),
                "SLU-F1": round(100 * self.slu_f1, 1), "PP": round(100 * self.perfect_parsing, 1)}


def write_table(rows: dict, path) -> None:
    """CSV with columns system, WER, Acc., SLU-F1, PP; ``rows`` maps a system name to an EvalReport."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system", "WER", "Acc.", "SLU-F1", "PP"])
        for name, rep in rows.items():
            r = rep.table_row()
            w.writerow([name, r["WER"], r["Acc."], r["SLU-F1"], r["PP"]])


def evaluate(examples, predictions, slot_filter=None) -> EvalReport:
    """Score predictions against gold examples; ``slot_filter`` restricts entity metrics to those types."""
    keep = (lambda e: True) if slot_filter is None else (lambda e: e[0] in set(slot_filter))
    golds = [[tuple(e[:2]) for e in ex.entities if keep(e)] for ex in examples]
    preds = [[tuple(e[:2]) for e in p.entities if keep(e)] for p in predictions]
    fe = corpus_entity_f1(golds, preds, "exact")[2]
    fw = corpus_entity_f1(golds, preds, "word")[2]
    fc = corpus_entity_f1(golds, preds, "char")[2]
    return EvalReport(
        wer=corpus_wer([ex.transcript for ex in examples], [p.transcript for p in predictions]),
        intent_accuracy=intent_accuracy([ex.intent for ex in examples], [p.intent for p in predictions]),
        f1_exact=fe, f1_word=fw, f1_char=fc, slu_f1=harmonic(fw, fc),
        perfect_parsing=perfect_parsing([ex.intent for ex in examples], golds,
                                        [p.intent for p in predictions], preds),
        n_utterances=len(examples), n_gold_entities=sum(map(len, golds)), n_pred_entities=sum(map(len, preds)),
    )
