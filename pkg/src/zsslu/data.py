"""Synthetic zero-shot SLU corpora, pseudo-speech features and SLURP ingestion."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import tokenize

logger = logging.getLogger(__name__)

CORPUS_FORMAT = 1


@dataclass
class SLUExample:
    id: str
    transcript: str
    intent: str
    entities: list = field(default_factory=list)
    features: np.ndarray | None = None

    def __post_init__(self):
        self.entities = [tuple(e) for e in self.entities]

    def check_extractive(self) -> None:
        words = tokenize(self.transcript)
        for slot, value in self.entities:
            vt = tokenize(value)
            if not any(words[i:i + len(vt)] == vt for i in range(len(words) - len(vt) + 1)):
                raise ValueError(f"{self.id}: value {value!r} for {slot} is not a span of {self.transcript!r}")

    def to_json(self) -> dict:
        return {"id": self.id, "transcript": self.transcript, "intent": self.intent,
                "entities": [list(e) for e in self.entities]}

    @classmethod
    def from_json(cls, d: dict) -> "SLUExample":
        return cls(d["id"], d["transcript"], d["intent"], [tuple(e) for e in d["entities"]])


@dataclass
class IntentSpec:
    id: str
    carriers: list
    description: str
    slots: list


@dataclass
class SlotSpec:
    id: str
    noun: str
    values: list
    description: str = ""


@dataclass
class CorpusSpec:
    intents: list
    slots: list
    held_out_slots: list
    split_seed: int = 0
    noise_sigma: float = 0.1
    frames_per_token: int = 2
    d_feat: int = 16
    connectors: list = field(default_factory=lambda: ["to", "at"])
    max_slots_per_utterance: int = 3

    def __post_init__(self):
        self.intents = [i if isinstance(i, IntentSpec) else IntentSpec(**i) for i in self.intents]
        self.slots = [s if isinstance(s, SlotSpec) else SlotSpec(**s) for s in self.slots]
        known = {s.id for s in self.slots}
        for sid in self.held_out_slots:
            if sid not in known:
                raise ValueError(f"held-out slot {sid!r} is not a defined slot")
        for it in self.intents:
            for sid in it.slots:
                if sid not in known:
                    raise ValueError(f"intent {it.id!r} references unknown slot {sid!r}")

    @property
    def seen_slots(self) -> list:
        return [s.id for s in self.slots if s.id not in self.held_out_slots]

    def slot(self, sid: str) -> SlotSpec:
        return next(s for s in self.slots if s.id == sid)

    def words(self) -> set:
        out = set(self.connectors) | {"with", "and", "the"}
        for it in self.intents:
            for c in it.carriers:
                out.update(tokenize(c))
        for s in self.slots:
            out.update(tokenize(s.noun))
            for v in s.values:
                out.update(tokenize(v))
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "CorpusSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_spec(**overrides) -> CorpusSpec:
    """Ten intents, eight slot types; ``speed`` and ``mood`` are held out."""
    slots = [
        SlotSpec("color", "color", ["red", "blue", "green", "white", "yellow", "purple"], "color"),
        SlotSpec("volume", "volume", ["low", "high", "medium", "loud", "quiet"], "volume"),
        SlotSpec("time", "time", ["noon", "midnight", "seven am", "nine pm", "six thirty"], "time"),
        SlotSpec("city", "city", ["london", "paris", "berlin", "tokyo", "new york", "madrid"], "city"),
        SlotSpec("artist", "artist", ["adele", "drake", "taylor swift", "beyonce", "coldplay"], "artist"),
        SlotSpec("room", "room", ["kitchen", "bedroom", "living room", "garage", "office"], "room"),
        SlotSpec("speed", "speed", ["slow", "fast", "normal", "very fast", "gentle"], "speed"),
        SlotSpec("mood", "mood", ["calm", "happy", "sad", "relaxed", "energetic"], "mood"),
    ]
    intents = [
        IntentSpec("play_music", ["play some music", "put on a song"], "play music", ["artist", "volume", "mood"]),
        IntentSpec("set_lights", ["turn on the lights", "switch the lights on"], "turn on the lights",
                   ["color", "room", "mood"]),
        IntentSpec("set_alarm", ["set an alarm", "wake me up"], "set an alarm", ["time", "volume"]),
        IntentSpec("check_weather", ["tell me the weather", "show the forecast"], "check the weather",
                   ["city", "time"]),
        IntentSpec("book_taxi", ["book a taxi", "order a cab"], "book a taxi", ["city", "time", "speed"]),
        IntentSpec("start_fan", ["start the fan", "turn the fan on"], "start the fan", ["speed", "room"]),
        IntentSpec("call_friend", ["call my friend", "phone my friend"], "call a friend", ["time", "city"]),
        IntentSpec("play_radio", ["play the radio", "tune the radio"], "play the radio",
                   ["volume", "mood", "city"]),
        IntentSpec("clean_house", ["clean the floor", "start the vacuum"], "clean the house",
                   ["room", "speed", "time"]),
        IntentSpec("paint_wall", ["paint the wall", "paint the fence"], "paint a wall", ["color", "room", "artist"]),
    ]
    kw = dict(intents=intents, slots=slots, held_out_slots=["speed", "mood"])
    kw.update(overrides)
    return CorpusSpec(**kw)


# ---------------------------------------------------------------- features


def token_embedding(token: str, d_feat: int) -> np.ndarray:
    """Fixed unit vector derived from a hash of the token string alone."""
    seed = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "little")
    v = np.random.default_rng(seed).normal(size=d_feat)
    return v / np.linalg.norm(v)


def featurize(transcript: str, spec: CorpusSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Pseudo-speech frames: ``frames_per_token`` noisy copies of each token's hashed vector."""
    words = tokenize(transcript)
    if not words:
        raise ValueError("cannot featurize an empty transcript")
    f = spec.frames_per_token
    base = np.repeat(np.stack([token_embedding(w, spec.d_feat) for w in words]), f, axis=0)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        base = base + rng.normal(0.0, spec.noise_sigma, base.shape)
    return base


# ---------------------------------------------------------------- generation


def _utterance(spec: CorpusSpec, intent: IntentSpec, slot_ids: list, rng: np.random.Generator, uid: str):
    words = [intent.carriers[rng.integers(len(intent.carriers))]]
    entities = []
    for j, sid in enumerate(slot_ids):
        s = spec.slot(sid)
        value = s.values[rng.integers(len(s.values))]
        conn = spec.connectors[rng.integers(len(spec.connectors))]
        words.append(("with the " if j == 0 else "and the ") + f"{s.noun} {conn} {value}")
        entities.append((sid, value))
    return SLUExample(uid, " ".join(words), intent.id, entities)


def _sample(spec: CorpusSpec, rng, uid: str, need_held_out: bool):
    held = set(spec.held_out_slots)
    while True:
        intent = spec.intents[rng.integers(len(spec.intents))]
        pool = list(intent.slots) if need_held_out else [s for s in intent.slots if s not in held]
        if need_held_out and not held.intersection(pool):
            continue
        lo = 1 if need_held_out else 0
        k = int(rng.integers(lo, min(len(pool), spec.max_slots_per_utterance) + 1))
        chosen = [pool[i] for i in rng.permutation(len(pool))[:k]]
        if need_held_out and not held.intersection(chosen):
            continue
        return _utterance(spec, intent, chosen, rng, uid)


def generate_corpus(spec: CorpusSpec, sizes=(200, 40, 40), rng: np.random.Generator | None = None) -> dict:
    """Train/dev splits use seen slots only; every test utterance mentions a held-out slot."""
    if not spec.seen_slots:
        raise ValueError("every slot is held out; nothing to train on")
    rng = np.random.default_rng(spec.split_seed) if rng is None else rng
    out = {}
    for name, n, held in (("train", sizes[0], False), ("dev", sizes[1], False), ("test", sizes[2], True)):
        out[name] = [_sample(spec, rng, f"{name}-{i:05d}", held) for i in range(n)]
    return out


def generate_sentences(spec: CorpusSpec, n: int, rng: np.random.Generator) -> list[str]:
    """Unlabelled utterance-like sentences over the full vocabulary (all slots)."""
    out = []
    for i in range(n):
        intent = spec.intents[rng.integers(len(spec.intents))]
        pool = [s.id for s in spec.slots]
        k = int(rng.integers(0, spec.max_slots_per_utterance + 1))
        chosen = [pool[j] for j in rng.permutation(len(pool))[:k]]
        out.append(_utterance(spec, intent, chosen, rng, f"s{i}").transcript)
    return out


def generate_pretraining_examples(spec: CorpusSpec, n: int, rng: np.random.Generator,
                                  exclude=()) -> list[SLUExample]:
    """Utterance-like sentences over every slot type; entities carry the noun as a third field."""
    exclude = set(exclude)
    pool = [s.id for s in spec.slots]
    out = []
    while len(out) < n:
        intent = spec.intents[rng.integers(len(spec.intents))]
        k = int(rng.integers(0, spec.max_slots_per_utterance + 1))
        chosen = [pool[j] for j in rng.permutation(len(pool))[:k]]
        ex = _utterance(spec, intent, chosen, rng, f"pre-{len(out):06d}")
        if ex.transcript in exclude:
            continue
        ex.entities = [(sid, v, spec.slot(sid).noun) for sid, v in ex.entities]
        out.append(ex)
    return out


@dataclass
class TextProbes:
    """Material for generic probe text about a sentence.

    attributes: noun -> possible values; phrases: carrier phrases; askable:
    nouns that may appear in questions; meanings: carrier phrase -> gloss.
    """

    attributes: dict
    phrases: list
    askable: list = field(default_factory=list)
    meanings: dict = field(default_factory=dict)


def text_probes(spec: CorpusSpec) -> TextProbes:
    """Probes for foundation pretraining; held-out nouns are never asked about."""
    held = set(spec.held_out_slots)
    return TextProbes({s.noun: list(s.values) for s in spec.slots},
                      sorted({c for it in spec.intents for c in it.carriers}),
                      sorted(s.noun for s in spec.slots if s.id not in held),
                      {c: it.description for it in spec.intents for c in it.carriers})


def featurize_all(examples, spec: CorpusSpec, seed: int = 0) -> None:
    for i, ex in enumerate(examples):
        ex.features = featurize(ex.transcript, spec, np.random.default_rng([seed, i]))


SPLITS = ("train", "dev", "test")


def featurize_corpus(corpus: dict, spec: CorpusSpec, seed: int = 0) -> None:
    """Deterministic features for every split; each split draws its own noise stream."""
    for j, name in enumerate(SPLITS):
        if name in corpus:
            featurize_all(corpus[name], spec, seed=seed * 10 + j + 1)


# ---------------------------------------------------------------- files


def save_jsonl(examples, path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json()) + "\n")


def load_jsonl(path) -> list[SLUExample]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(SLUExample.from_json(json.loads(line)))
                except (KeyError, json.JSONDecodeError) as exc:
                    raise ValueError(f"{path}:{n}: malformed example ({exc})") from exc
    return out


def save_corpus(corpus: dict, spec: CorpusSpec, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec.save(out / "spec.json")
    for name, examples in corpus.items():
        save_jsonl(examples, out / f"{name}.jsonl")


def load_corpus(corpus_dir) -> tuple[CorpusSpec, dict]:
    d = Path(corpus_dir)
    if not (d / "spec.json").is_file():
        raise FileNotFoundError(f"{d / 'spec.json'} not found")
    spec = CorpusSpec.load(d / "spec.json")
    return spec, {name: load_jsonl(d / f"{name}.jsonl") for name in SPLITS if (d / f"{name}.jsonl").is_file()}


@dataclass
class SlurpLoadReport:
    examples: list
    errors: list  # (line number, message)


def _slurp_line(d: dict, n: int) -> SLUExample:
    sentence = d["sentence"]
    if "tokens" in d:
        toks = [t["surface"] for t in d["tokens"]]
    else:
        toks = sentence.split()
    intent = d.get("intent") or f"{d['scenario']}_{d['action']}"
    if "scenario" in d and "action" in d:
        intent = f"{d['scenario']}_{d['action']}"
    entities = []
    for e in d["entities"]:
        span = e["span"]
        if not span or max(span) >= len(toks):
            raise ValueError(f"entity span {span} outside {len(toks)} tokens")
        entities.append((e["type"], " ".join(toks[i] for i in span).lower()))
    ex = SLUExample(str(d.get("slurp_id", n)), " ".join(toks).lower(), intent, entities)
    ex.check_extractive()
    return ex


def load_slurp_jsonl(path, spec: CorpusSpec | None = None) -> SlurpLoadReport:
    """Read SLURP-style annotation lines; malformed lines are reported, the rest kept."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    examples, errors = [], []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            ex = _slurp_line(json.loads(line), n)
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            errors.append((n, f"{type(exc).__name__}: {exc}"))
            continue
        if spec is not None:
            ex.features = featurize(ex.transcript, spec, np.random.default_rng(n))
        examples.append(ex)
    for n, msg in errors:
        logger.warning("%s:%d skipped: %s", path, n, msg)
    if not examples:
        raise ValueError(f"{path}: no valid lines ({len(errors)} malformed)")
    return SlurpLoadReport(examples, errors)
