"""Three-stage zero-shot SLU decoding: ASR with cached states, intent QA, slot QA."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import DecoderState, Transformer
from .prefix import PrefixBanks
from .questions import QuestionSet

logger = logging.getLogger(__name__)

PREDICTION_SCHEMA = 1
YES, NO = "Yes", "No"

Trace = Callable[[str, str, list], None]


@dataclass
class PipelineConfig:
    include_transcript_in_prompt: bool = True
    use_asr_states: bool = True
    max_answer_len: int = 6
    max_asr_len: int = 40
    # "pair": p_yes = P(Yes) / (P(Yes) + P(No)); "vocab": raw softmax probability of Yes
    normalization: str = "pair"
    intent_batch: bool = False

    def __post_init__(self):
        if self.normalization not in ("pair", "vocab"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if not (self.include_transcript_in_prompt or self.use_asr_states):
            logger.warning("pipeline configured with neither transcript nor ASR states; answers ignore the audio")

    @classmethod
    def for_ablation(cls, name: str, **kw) -> "PipelineConfig":
        flags = {"none": {}, "no-transcript": {"include_transcript_in_prompt": False},
                 "no-asr-states": {"use_asr_states": False}}
        if name not in flags:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(flags)}")
        return cls(**{**flags[name], **kw})


@dataclass(frozen=True)
class DecodeCache:
    """Decoder self-attention rows for SOT and the transcript tokens; never modified."""

    layers: tuple
    token_ids: tuple
    complete: bool = True

    @property
    def end_position(self) -> int:
        return len(self.token_ids)

    def state(self) -> DecoderState:
        return DecoderState(list(self.layers), list(self.token_ids))

    @classmethod
    def from_state(cls, state: DecoderState, complete: bool = True) -> "DecodeCache":
        layers = []
        for k, v in state.layers:
            k, v = k.copy(), v.copy()
            k.setflags(write=False)
            v.setflags(write=False)
            layers.append((k, v))
        return cls(tuple(layers), tuple(state.tokens), complete)


@dataclass
class SLUPrediction:
    transcript: str
    intent: str
    intent_score: float
    entities: list = field(default_factory=list)  # (slot id, value, sequence log-prob)
    intent_ranking: list = field(default_factory=list)
    asr_complete: bool = True

    def to_json(self, uid: str | None = None) -> dict:
        d = {"schema_version": PREDICTION_SCHEMA, "transcript": self.transcript,
             "intent": {"id": self.intent, "score": self.intent_score},
             "entities": [{"slot": s, "value": v, "logprob": lp} for s, v, lp in self.entities],
             "asr_complete": self.asr_complete}
        if uid is not None:
            d = {"id": uid, **d}
        return d

    def entity_pairs(self) -> list:
        return [(s, v) for s, v, _ in self.entities]


def write_predictions(preds, path, ids=None) -> None:
    with open(path, "w") as fh:
        for i, p in enumerate(preds):
            fh.write(json.dumps(p.to_json(None if ids is None else ids[i])) + "\n")


def _prompt_start(model: Transformer, banks: PrefixBanks, transcript: str, cache: DecodeCache,
                  config: PipelineConfig, task: str) -> tuple[DecoderState | None, int]:
    """Decoder state every question continues from: ASR rows, then the transcript tokens."""
    if config.use_asr_states:
        state, offset = cache.state(), cache.end_position
    else:
        state, offset = None, 0
    if config.include_transcript_in_prompt:
        ids = model.vocab.encode(transcript)
        if ids:
            _, state = model.decode_step(ids, state, None, banks.decoder, False, offset, task=task)
            offset += len(ids)
    return state, offset


def build_prompt(model: Transformer, transcript: str, question_text: str, config: PipelineConfig) -> list[int]:
    """Full token sequence fed after the cached ASR rows (or from position 0 without them)."""
    vocab = model.vocab
    ids = vocab.encode(transcript) if config.include_transcript_in_prompt else []
    ids = ids + vocab.encode(question_text)
    if not ids:
        raise ValueError("empty prompt: no transcript tokens and no question tokens")
    return ids


def run_asr(features, model: Transformer, banks: PrefixBanks | None, max_len: int = 40) -> tuple[str, DecodeCache]:
    """Greedy transcription; the cache keeps rows for SOT plus every emitted word."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError(f"features must be a non-empty (T, d_feat) array, got {feats.shape}")
    vocab = model.vocab
    banks = banks or PrefixBanks()
    enc = model.encode(feats, banks.active_encoder)
    max_len = min(max_len, model.config.max_positions - 1)
    res = model.greedy_decode(None, [vocab.sot], vocab.eot, max_len, enc, banks.decoder, True, 0, task="asr")
    if not res.complete:
        logger.warning("ASR hit max length %d without end-of-transcript", max_len)
    return vocab.decode(res.tokens), DecodeCache.from_state(res.state, res.complete)


def _answer_distribution(model: Transformer, logits_row: np.ndarray, config: PipelineConfig) -> float:
    y, n = model.vocab.id(YES), model.vocab.id(NO)
    z = logits_row - logits_row.max()
    if config.normalization == "pair":
        a, b = z[y], z[n]
        m = max(a, b)
        ey, en = np.exp(a - m), np.exp(b - m)
        return float(ey / (ey + en))
    p = np.exp(z) / np.exp(z).sum()
    return float(p[y])


def classify_intent(transcript: str, cache: DecodeCache, model: Transformer, banks: PrefixBanks | None,
                    questions, config: PipelineConfig | None = None, trace: Trace | None = None) -> list:
    """Score every intent question by its "Yes" probability; best first."""
    config = config or PipelineConfig()
    banks = banks or PrefixBanks()
    qlist = questions.q_intent if isinstance(questions, QuestionSet) else list(questions)
    if not qlist:
        raise ValueError("no intent questions to score")
    prompts = [build_prompt(model, transcript, q.text, config) for q in qlist]
    if trace is not None:
        for q, p in zip(qlist, prompts):
            trace("intent", q.label_id, list(p))
    start, offset = _prompt_start(model, banks, transcript, cache, config, "intent")
    questions_only = [model.vocab.encode(q.text) for q in qlist]
    if config.intent_batch:
        rows = _batched_last_logits(model, banks, start, offset, questions_only, "intent")
    else:
        rows = [model.decode_step(p, start, None, banks.decoder, False, offset, task="intent")[0].data[-1]
                for p in questions_only]
    scored = [(q.label_id, _answer_distribution(model, r, config)) for q, r in zip(qlist, rows)]
    # ties go to the smaller label id
    return sorted(scored, key=lambda t: (-t[1], t[0]))


def _batched_last_logits(model: Transformer, banks: PrefixBanks, start: DecoderState | None, offset: int,
                         prompts: list, task: str) -> list:
    from .tensor import Tensor

    B = len(prompts)
    L = max(len(p) for p in prompts)
    toks = np.full((B, L), model.vocab.pad, dtype=np.int64)
    for i, p in enumerate(prompts):
        toks[i, :len(p)] = p
    pos = offset + np.broadcast_to(np.arange(L), (B, L))
    past = None
    if start is not None and start.layers:
        past = [(Tensor(np.broadcast_to(k, (B,) + k.shape).copy()), Tensor(np.broadcast_to(v, (B,) + v.shape).copy()))
                for k, v in start.layers]
    bank = banks.decoder
    vis = bank.visible(task) if bank is not None else None
    logits, _ = model.decoder_forward(toks, pos, past, None, None, False, bank, vis)
    return [logits.data[i, len(p) - 1] for i, p in enumerate(prompts)]


def resolve_conflicts(candidates: list) -> list:
    """Keep one slot per identical answer string: highest log-prob, then smaller slot id."""
    best: dict[str, tuple] = {}
    for slot, value, lp in candidates:
        cur = best.get(value)
        if cur is None or lp > cur[2] or (lp == cur[2] and slot < cur[0]):
            best[value] = (slot, value, lp)
    keep = set(best.values())
    return [c for c in candidates if c in keep]


def fill_slots(transcript: str, cache: DecodeCache, model: Transformer, banks: PrefixBanks | None,
               intent_id: str, qset: QuestionSet, config: PipelineConfig | None = None,
               trace: Trace | None = None) -> list:
    """Greedy answers to the questions of slots mapped to ``intent_id``; EOT alone means absent."""
    config = config or PipelineConfig()
    banks = banks or PrefixBanks()
    questions = qset.relevant_slots(intent_id)
    vocab = model.vocab
    candidates = []
    if not questions:
        return candidates
    start, offset = _prompt_start(model, banks, transcript, cache, config, "slot")
    for q in questions:
        if trace is not None:
            trace("slot", q.label_id, build_prompt(model, transcript, q.text, config))
        prompt = vocab.encode(q.text)
        budget = min(config.max_answer_len, model.config.max_positions - offset - len(prompt))
        res = model.greedy_decode(start, prompt, vocab.eot, max(budget, 1), None, banks.decoder, False, offset,
                                  task="slot")
        if not res.tokens:
            continue
        candidates.append((q.label_id, vocab.decode(res.tokens), res.logprob))
    return resolve_conflicts(candidates)


def run_pipeline(features, model: Transformer, banks: PrefixBanks | None, qset: QuestionSet,
                 config: PipelineConfig | None = None, trace: Trace | None = None) -> SLUPrediction:
    config = config or PipelineConfig()
    transcript, cache = run_asr(features, model, banks, config.max_asr_len)
    ranking = classify_intent(transcript, cache, model, banks, qset, config, trace)
    intent, score = ranking[0]
    entities = fill_slots(transcript, cache, model, banks, intent, qset, config, trace)
    return SLUPrediction(transcript, intent, score, entities, ranking, cache.complete)
