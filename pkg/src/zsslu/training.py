"""Contrastive prefix-tuning with AdamW, plus full-parameter pretraining of the base model."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import SLUExample, TextProbes, featurize
from .model import Transformer, save_checkpoint, tokenize
from .pipeline import NO, YES, PipelineConfig
from .prefix import PrefixBanks, new_bank
from .questions import QuestionSet
from .tensor import Tensor

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or inf; the optimizer step was not applied."""


# ---------------------------------------------------------------- batches


@dataclass
class ContrastiveBatch:
    example: SLUExample
    intent_items: list  # (intent id, "Yes" | "No"), positive first
    slot_items: list  # (slot id, value or None for EOT alone)


def build_batch(example: SLUExample, qset: QuestionSet, n_negatives: int,
                rng: np.random.Generator) -> ContrastiveBatch:
    """One positive intent question plus up to N sampled negatives; likewise for slots."""
    if example.intent not in qset.intent_ids:
        raise KeyError(f"{example.id}: gold intent {example.intent!r} has no question")
    others = [i for i in qset.intent_ids if i != example.intent]
    k = min(n_negatives, len(others))
    neg = [others[j] for j in rng.choice(len(others), size=k, replace=False)] if k else []
    intent_items = [(example.intent, YES)] + [(i, NO) for i in neg]
    known = set(qset.slot_ids)
    gold = [(s, v) for s, v in example.entities if s in known]
    gold_ids = {s for s, _ in gold}
    pool = [s for s in qset.slot_ids if s not in gold_ids]
    k = min(n_negatives, len(pool))
    sneg = [pool[j] for j in rng.choice(len(pool), size=k, replace=False)] if k else []
    return ContrastiveBatch(example, intent_items, list(gold) + [(s, None) for s in sneg])


@dataclass
class QAItem:
    """A teacher-forced continuation after one utterance's decoder states."""

    utt: int
    prompt: list
    answer: list
    task: str


def qa_items(batch: ContrastiveBatch, utt: int, model: Transformer, qset: QuestionSet) -> list[QAItem]:
    """Question-plus-answer items; the shared transcript segment is handled by the loss."""
    vocab = model.vocab
    items = []
    for lid, ans in batch.intent_items:
        items.append(QAItem(utt, vocab.encode(qset.intent(lid).text), [vocab.id(ans)], "intent"))
    for lid, value in batch.slot_items:
        answer = ([] if value is None else vocab.encode(value)) + [vocab.eot]
        items.append(QAItem(utt, vocab.encode(qset.slot(lid).text), answer, "slot"))
    return items


# ---------------------------------------------------------------- loss


def _pad(rows, fill, width=None):
    width = max(len(r) for r in rows) if width is None else width
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def _features(examples) -> tuple[np.ndarray, np.ndarray]:
    n = max(ex.features.shape[0] for ex in examples)
    d = examples[0].features.shape[1]
    feats = np.zeros((len(examples), n, d))
    valid = np.zeros((len(examples), n), dtype=bool)
    for i, ex in enumerate(examples):
        feats[i, :len(ex.features)] = ex.features
        valid[i, :len(ex.features)] = True
    return feats, valid


def greedy_transcripts(model: Transformer, banks: PrefixBanks, examples, max_len: int = 40) -> list[str]:
    from .pipeline import run_asr

    return [run_asr(ex.features, model, banks, max_len)[0] for ex in examples]


def sequence_loss(model: Transformer, banks: PrefixBanks | None, examples, items_fn, config: PipelineConfig,
                  state_source: str = "gold"):
    """ASR cross-entropy plus answer-only cross-entropy of the QA items, wired as at inference.

    ``items_fn(utt_index)`` yields the QAItems of one utterance. Each item sees
    (ASR states if enabled) + (transcript tokens if enabled) + its own prompt.
    The transcript segment is run once per utterance and shared by its items;
    under causal attention this equals running it inside every item.
    """
    banks = banks or PrefixBanks()
    vocab = model.vocab
    dec = banks.decoder
    U = len(examples)
    feats, fvalid = _features(examples)
    enc = model.encode(Tensor(feats), banks.active_encoder, fvalid)
    gold = [vocab.encode(ex.transcript) for ex in examples]
    inp = _pad([[vocab.sot] + g for g in gold], vocab.pad)
    tgt = _pad([g + [vocab.eot] for g in gold], vocab.pad)
    amask = np.arange(inp.shape[1])[None, :] < np.array([len(g) + 1 for g in gold])[:, None]
    pos = np.broadcast_to(np.arange(inp.shape[1]), inp.shape)
    vis = dec.visible("asr") if dec is not None else None
    logits, kv = model.decoder_forward(inp, pos, None, None, enc, True, dec, vis)
    loss_asr = T.cross_entropy_logits(logits, tgt, amask)
    parts = {"asr": loss_asr.item()}

    if state_source == "gold":
        heads = gold
        cache_len = np.array([len(g) + 1 for g in gold])
    elif state_source == "greedy":
        heads = [vocab.encode(t) for t in greedy_transcripts(model, banks, examples)]
        cin = _pad([[vocab.sot] + h for h in heads], vocab.pad)
        _, kv = model.decoder_forward(cin, np.broadcast_to(np.arange(cin.shape[1]), cin.shape), None, None,
                                      enc, True, dec, vis)
        cache_len = np.array([len(h) + 1 for h in heads])
    else:
        raise ValueError(f"unknown state source {state_source!r}")

    items = [it for u in range(U) for it in items_fn(u)]
    if not items:
        return loss_asr, parts
    # the transcript segment is run once per utterance and per prefix view; with task masking
    # each task sees different prefix rows, so each task gets its own pass
    tasks = sorted({it.task for it in items})
    views = tasks if dec is not None and dec.task_masking else tasks[:1]
    if config.use_asr_states:
        P = int(cache_len.max())
        past = [(T.slice_axis(k, 1, 0, P), T.slice_axis(v, 1, 0, P)) for k, v in kv]
        pvalid = np.arange(P)[None, :] < cache_len[:, None]
        offset = cache_len.copy()
    else:
        past, pvalid, offset = None, np.zeros((U, 0), dtype=bool), np.zeros(U, dtype=np.int64)
    if config.include_transcript_in_prompt and any(heads):
        htok = _pad(heads, vocab.pad)
        hlen = np.array([len(h) for h in heads])
        hpos = offset[:, None] + np.arange(htok.shape[1])[None, :]
        hvalid = np.arange(htok.shape[1])[None, :] < hlen[:, None]
        per_view = []
        for view in views:
            hvis = dec.visible(view) if dec is not None else None
            _, hkv = model.decoder_forward(htok, hpos, past, pvalid if past is not None else None, None, False,
                                           dec, hvis)
            if past is None:
                per_view.append(hkv)
            else:
                per_view.append([(T.concat([pk, hk], axis=1), T.concat([pv, hv], axis=1))
                                 for (pk, pv), (hk, hv) in zip(past, hkv)])
        past = per_view[0] if len(views) == 1 else [
            (T.concat([pv_[i][0] for pv_ in per_view], axis=0), T.concat([pv_[i][1] for pv_ in per_view], axis=0))
            for i in range(len(per_view[0]))]
        pvalid = np.concatenate([pvalid, hvalid], axis=1)
        offset = offset + hlen
    else:
        views = tasks[:1]

    seqs = [it.prompt + it.answer[:-1] for it in items]
    toks = _pad(seqs, vocab.pad)
    L = toks.shape[1]
    tg = np.full(toks.shape, vocab.pad, dtype=np.int64)
    m = np.zeros(toks.shape, dtype=bool)
    for i, it in enumerate(items):
        s0 = len(it.prompt) - 1
        tg[i, s0:s0 + len(it.answer)] = it.answer
        m[i, s0:s0 + len(it.answer)] = True
    utt = np.array([it.utt for it in items])
    row = utt + U * np.array([views.index(it.task) if len(views) > 1 else 0 for it in items])
    ipast, ivalid = None, None
    if past is not None:
        ipast = [(T.gather(k, row), T.gather(v, row)) for k, v in past]
        ivalid = pvalid[utt]
    ipos = offset[utt][:, None] + np.arange(L)[None, :]
    # padding tails of short items may run past the table; they are masked and causally invisible
    ipos = np.where(np.arange(L)[None, :] < np.array([len(s) for s in seqs])[:, None], ipos,
                    np.minimum(ipos, model.config.max_positions - 1))
    ivis = np.stack([dec.visible(it.task) for it in items]) if dec is not None else None
    logits2, _ = model.decoder_forward(toks, ipos, ipast, ivalid, None, False, dec, ivis)
    loss_qa = T.cross_entropy_logits(logits2, tg, m)
    parts["qa"] = loss_qa.item()
    return T.add(loss_asr, loss_qa), parts


def compute_loss(model: Transformer, banks: PrefixBanks | None, batches: list[ContrastiveBatch],
                 qset: QuestionSet, config: PipelineConfig | None = None, state_source: str = "gold"):
    """Summed ASR and answer-token losses for a mini-batch of contrastive batches."""
    config = config or PipelineConfig()
    examples = [b.example for b in batches]
    return sequence_loss(model, banks, examples, lambda u: qa_items(batches[u], u, model, qset), config,
                         state_source)


# ---------------------------------------------------------------- optimizer


@dataclass
class LinearSchedule:
    base_lr: float = 0.002
    total_steps: int = 1

    def lr(self, step: int) -> float:
        if self.total_steps <= 0:
            return 0.0
        return max(0.0, self.base_lr * (1.0 - step / self.total_steps))


class AdamW:
    """Adam with decoupled weight decay; ``lr`` scales both the update and the decay."""

    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        grads = []
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if g.shape != p.data.shape:
                raise T.ShapeError(f"gradient {g.shape} does not match parameter {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in parameter {p.name or i}; step skipped")
            grads.append(g)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data * (1 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params, grads, state: AdamW, lr: float) -> None:
    for p, g in zip(params, grads):
        p.grad = g
    state.step(lr)


# ---------------------------------------------------------------- training loops


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 12
    n_negatives: int = 10
    base_lr: float = 0.002
    weight_decay: float = 0.01
    state_source: str = "gold"
    max_steps: int | None = None
    eval_every_epoch: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    banks: PrefixBanks
    log: list = field(default_factory=list)
    best_epoch: int | None = None
    steps: int = 0


def _ensure_features(examples, spec, seed: int) -> None:
    for i, ex in enumerate(examples):
        if ex.features is None:
            ex.features = featurize(ex.transcript, spec, np.random.default_rng([seed, i]))


def train(model: Transformer, banks: PrefixBanks, corpus, qset: QuestionSet, config: TrainConfig | None = None,
          rng: np.random.Generator | None = None, dev=None, pipe_config: PipelineConfig | None = None,
          run_dir=None, dev_slots=None) -> TrainResult:
    """Prefix-tune ``banks`` on ``corpus``; base parameters are never touched."""
    from .metrics import evaluate
    from .pipeline import run_pipeline
    from .prefix import trainable_parameters

    config = config or TrainConfig()
    pipe_config = pipe_config or PipelineConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    corpus = list(corpus)
    if not corpus:
        raise ValueError("training corpus is empty")
    if any(ex.features is None for ex in corpus):
        raise ValueError("training examples need features")
    model.set_trainable(False)
    params = trainable_parameters(model, banks)
    for p in params:
        p.requires_grad = True
    opt = AdamW(params, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(corpus) / config.batch_size)
    total = steps_per_epoch * config.epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    sched = LinearSchedule(config.base_lr, total)
    result = TrainResult(banks)
    best = -1.0
    step = 0
    for epoch in range(config.epochs):
        if step >= total:
            break
        t0 = time.perf_counter()
        order = rng.permutation(len(corpus))
        losses = []
        for s in range(0, len(order), config.batch_size):
            if step >= total:
                break
            chunk = [corpus[i] for i in order[s:s + config.batch_size]]
            batches = [build_batch(ex, qset, config.n_negatives, rng) for ex in chunk]
            opt.zero_grad()
            loss, _ = compute_loss(model, banks, batches, qset, pipe_config, config.state_source)
            T.backward(loss)
            opt.step(sched.lr(step))
            losses.append(loss.item())
            step += 1
        # wall time goes to the log only so metrics files stay byte-identical across reruns
        entry = {"epoch": epoch + 1, "steps": step, "train_loss": float(np.mean(losses)), "lr": sched.lr(step)}
        seconds = time.perf_counter() - t0
        if dev and config.eval_every_epoch:
            preds = [run_pipeline(ex.features, model, banks, qset, pipe_config) for ex in dev]
            rep = evaluate(dev, preds, dev_slots)
            entry["dev"] = rep.to_json()
            score = rep.slu_f1 + rep.intent_accuracy
            if score > best:
                best = score
                result.best_epoch = epoch + 1
                if run_dir is not None:
                    save_checkpoint(Path(run_dir) / "best.npz", model, banks, {"epoch": epoch + 1})
        logger.info("epoch %d (%.1fs): %s", epoch + 1, seconds, {k: v for k, v in entry.items() if k != "dev"})
        result.log.append(entry)
    result.steps = step
    if run_dir is not None:
        run_dir = Path(run_dir)
        save_checkpoint(run_dir / "final.npz", model, banks, {"epoch": len(result.log)})
        (run_dir / "metrics.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in result.log))
    return result


# ---------------------------------------------------------------- base pretraining


@dataclass
class PretrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 0.003
    weight_decay: float = 0.01
    continuation_prob: float = 1.0
    # random frozen decoder rows injected each step so the base tolerates extra attention memory
    distractor_max_length: int = 30
    distractor_scales: tuple = (0.02, 0.1, 0.5)


def continuation_text(example: SLUExample, rng: np.random.Generator, probes: TextProbes | None = None,
                      n_meanings: int = 2, max_tokens: int | None = None) -> str:
    """Plain text that may follow a transcript: an optional repeat, restated attributes, probes.

    With ``max_tokens``, whole trailing parts are dropped until the text fits.
    """
    parts = []
    if rng.random() < 0.5:
        parts.append(example.transcript + " .")
    for j in rng.permutation(len(example.entities)):
        slot_noun, value = example.entities[j][2], example.entities[j][1]
        parts.append(f"the {slot_noun} is {value} .")
    if probes is None:
        return _fit(parts, max_tokens)
    said = dict((e[2], e[1]) for e in example.entities)
    probe_parts = []
    nouns = sorted(probes.attributes)
    noun = nouns[rng.integers(len(nouns))]
    if noun in said and rng.random() < 0.5:
        value = said[noun]
    else:
        values = probes.attributes[noun]
        value = values[rng.integers(len(values))]
    probe_parts.append(f"is the {noun} {value} ? {YES if said.get(noun) == value else NO} .")
    if probes.askable:
        noun = probes.askable[rng.integers(len(probes.askable))]
        probe_parts.append(f"What is the {noun}? {said.get(noun, 'nothing')} .")
    own = [p for p in probes.phrases if example.transcript.startswith(p)]
    phrase = own[0] if own and rng.random() < 0.5 else probes.phrases[rng.integers(len(probes.phrases))]
    probe_parts.append(f"Does it say {phrase}? {YES if example.transcript.startswith(phrase) else NO} .")
    if probes.meanings:
        glosses = sorted(set(probes.meanings.values()))
        mine = probes.meanings.get(own[0]) if own else None
        picked = [glosses[j] for j in rng.permutation(len(glosses))[:n_meanings]]
        if mine is not None and mine not in picked and rng.random() < 0.5:
            picked[0] = mine
        for gloss in picked:
            probe_parts.append(f"Does it mean {gloss}? {YES if gloss == mine else NO} .")
    return _fit(parts + [probe_parts[j] for j in rng.permutation(len(probe_parts))], max_tokens)


def _fit(parts: list, max_tokens: int | None) -> str:
    if max_tokens is not None:
        while parts and sum(len(tokenize(p)) for p in parts) > max_tokens:
            parts = parts[:-1]
    return " ".join(parts)


def pretrain_base(model: Transformer, sentences, config: PretrainConfig | None = None,
                  rng: np.random.Generator | None = None, log_every: int = 100,
                  probes: TextProbes | None = None) -> list:
    """Full-parameter multitask pretraining: transcription plus text continuation after the transcript.

    ``sentences`` are SLUExamples with features whose entities are
    (slot id, value, noun) triples; labels are never used, only the text.
    """
    config = config or PretrainConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    model.set_trainable(True)
    params = model.parameters()
    opt = AdamW(params, weight_decay=config.weight_decay)
    sched = LinearSchedule(config.lr, config.steps)
    vocab = model.vocab
    history = []
    plain = PipelineConfig(include_transcript_in_prompt=False, use_asr_states=True)
    for step in range(config.steps):
        idx = rng.choice(len(sentences), size=min(config.batch_size, len(sentences)), replace=False)
        chunk = [sentences[i] for i in idx]

        def items_fn(u, chunk=chunk):
            if rng.random() >= config.continuation_prob:
                return []
            room = model.config.max_positions - len(vocab.encode(chunk[u].transcript)) - 2
            ids = vocab.encode(continuation_text(chunk[u], rng, probes, max_tokens=room)) + [vocab.eot]
            if len(ids) < 2:
                return []
            return [QAItem(u, ids[:1], ids[1:], "asr")]

        banks = None
        if config.distractor_max_length > 0:
            length = int(rng.integers(0, config.distractor_max_length + 1))
            scale = float(config.distractor_scales[rng.integers(len(config.distractor_scales))])
            bank = new_bank("decoder-self", model.config.n_dec_layers, length, model.config.d_model, scale, rng)
            for t in bank.tensors():
                t.requires_grad = False
            banks = PrefixBanks(None, bank)
        opt.zero_grad()
        loss, parts = sequence_loss(model, banks, chunk, items_fn, plain)
        T.backward(loss)
        opt.step(sched.lr(step))
        history.append(parts)
        if log_every and (step + 1) % log_every == 0:
            recent = history[-log_every:]
            logger.info("pretrain step %d: %s", step + 1,
                        {k: round(float(np.mean([h.get(k, np.nan) for h in recent])), 4) for k in recent[-1]})
    model.set_trainable(False)
    return history


PROBE_WORDS = (YES, NO, "is", ".", "?", "Does", "it", "say", "What", "nothing", "mean")


def foundation_vocabulary(spec, qset: QuestionSet, extra_texts=()):
    """Every corpus word, every question word and the probe-text words."""
    from .model import Vocabulary

    return Vocabulary.from_texts(list(qset.texts()) + [" ".join(sorted(spec.words()))] + list(extra_texts),
                                 extra=PROBE_WORDS)


def build_foundation(spec, qset: QuestionSet, model_config=None, config: PretrainConfig | None = None,
                     n_sentences: int = 6000, exclude=(), seed: int = 0, log_every: int = 100) -> Transformer:
    """Fresh base model pretrained on unlabelled sentences covering every slot noun.

    ``exclude`` holds transcripts (typically dev and test) that must not be
    seen during pretraining.
    """
    from .data import featurize_all, generate_pretraining_examples, text_probes
    from .model import ModelConfig

    probes = text_probes(spec)
    vocab = foundation_vocabulary(spec, qset, list(probes.meanings.values()))
    cfg = model_config or ModelConfig(vocab_size=len(vocab), d_feat=spec.d_feat)
    if cfg.vocab_size != len(vocab):
        cfg = ModelConfig(**{**asdict(cfg), "vocab_size": len(vocab)})
    model = Transformer(cfg, vocab, rng=np.random.default_rng([seed, 0]))
    rng = np.random.default_rng([seed, 1])
    sentences = generate_pretraining_examples(spec, n_sentences, rng, exclude=set(exclude))
    featurize_all(sentences, spec, seed=seed + 1000)
    pretrain_base(model, sentences, config, rng, log_every, probes=probes)
    return model
