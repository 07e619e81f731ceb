"""Semantic labels, their questions and LLM prompt emission for question generation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1

INTENT_DESCRIPTION_PROMPT = (
    'Give a very short description of the intent "{label}", starting with "The user wants to". '
    "Here are some example queries: {examples}."
)
SLOT_DESCRIPTION_PROMPT = (
    'Give a very short description of the slot label "{label}", starting with '
    '"A slot label that refers to". Here are some example slot values: {examples}.'
)
INTENT_QUESTION_TEMPLATE = "Does the user want to [intent_description]?"
SLOT_QUESTION_TEMPLATE = "What is the [slot_description]?"


class QuestionSetError(ValueError):
    """Invalid question set content, with the offending location in the message."""


@dataclass(frozen=True)
class SemanticLabel:
    id: str
    kind: str  # "intent" | "slot"
    name: str
    description: str | None = None

    def __post_init__(self):
        if self.kind not in ("intent", "slot"):
            raise ValueError(f"label kind must be 'intent' or 'slot', got {self.kind!r}")


@dataclass(frozen=True)
class Question:
    label_id: str
    kind: str
    text: str

    def __post_init__(self):
        if self.kind not in ("intent", "slot"):
            raise ValueError(f"question kind must be 'intent' or 'slot', got {self.kind!r}")
        if not self.text.strip() or not self.text.rstrip().endswith("?"):
            raise ValueError(f"question for {self.label_id!r} must be non-empty and end with '?': {self.text!r}")

    @property
    def answer_mode(self) -> str:
        return "binary" if self.kind == "intent" else "extractive"


@dataclass(frozen=True)
class LlmPromptPair:
    description_prompt: str
    question_template: str


def _clean_description(text: str) -> str:
    d = " ".join(text.strip().split())
    for lead in ("The user wants to ", "the user wants to ", "A slot label that refers to ",
                 "a slot label that refers to "):
        if d.startswith(lead):
            d = d[len(lead):]
    return d.rstrip(".?! ")


def question_from_description(label: SemanticLabel) -> Question:
    """Fixed-format question from a label description."""
    if not label.description or not label.description.strip():
        raise ValueError(f"label {label.id!r} has no description")
    d = _clean_description(label.description)
    if not d:
        raise ValueError(f"label {label.id!r} has an empty description")
    if label.kind == "intent":
        return Question(label.id, "intent", f"Does the user want to {d}?")
    return Question(label.id, "slot", f"What is the {d}?")


def build_llm_prompts(label: SemanticLabel, examples: list[str]) -> LlmPromptPair:
    if not examples:
        raise ValueError(f"label {label.id!r}: at least one example is required")
    quoted = ", ".join(f'"{e}"' for e in examples)
    if label.kind == "intent":
        return LlmPromptPair(INTENT_DESCRIPTION_PROMPT.format(label=label.name, examples=quoted),
                             INTENT_QUESTION_TEMPLATE)
    return LlmPromptPair(SLOT_DESCRIPTION_PROMPT.format(label=label.name, examples=quoted),
                         SLOT_QUESTION_TEMPLATE)


def write_llm_prompts(prompts: dict[str, tuple[SemanticLabel, LlmPromptPair]], out_dir) -> list[Path]:
    """One reviewable text file per label; nothing is sent anywhere."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for lid, (label, pair) in sorted(prompts.items()):
        p = out / f"{label.kind}__{lid}.txt"
        p.write_text(f"# label: {label.name} ({label.kind})\n\n[step 1: description]\n{pair.description_prompt}\n\n"
                     f"[step 2: question format]\n{pair.question_template}\n")
        paths.append(p)
    return paths


@dataclass
class QuestionSet:
    q_intent: list = field(default_factory=list)
    q_slot: list = field(default_factory=list)
    intent_slot_map: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for kind, qs in (("intent", self.q_intent), ("slot", self.q_slot)):
            seen = set()
            for i, q in enumerate(qs):
                if q.kind != kind:
                    raise QuestionSetError(f"{kind} questions[{i}]: has kind {q.kind!r}")
                if q.label_id in seen:
                    raise QuestionSetError(f"{kind} questions[{i}]: duplicate label {q.label_id!r}")
                seen.add(q.label_id)
        slots = {q.label_id for q in self.q_slot}
        for intent, sids in self.intent_slot_map.items():
            for sid in sids:
                if sid not in slots:
                    raise QuestionSetError(f"intent_slot_map[{intent!r}]: unknown slot id {sid!r}")

    def intent(self, label_id: str) -> Question:
        for q in self.q_intent:
            if q.label_id == label_id:
                return q
        raise KeyError(label_id)

    def slot(self, label_id: str) -> Question:
        for q in self.q_slot:
            if q.label_id == label_id:
                return q
        raise KeyError(label_id)

    @property
    def intent_ids(self) -> list:
        return [q.label_id for q in self.q_intent]

    @property
    def slot_ids(self) -> list:
        return [q.label_id for q in self.q_slot]

    def relevant_slots(self, intent_id: str) -> list[Question]:
        if intent_id not in self.intent_slot_map:
            raise KeyError(f"intent {intent_id!r} missing from intent_slot_map; known: {sorted(self.intent_slot_map)}")
        return [self.slot(s) for s in self.intent_slot_map[intent_id]]

    def without_slots(self, slot_ids) -> "QuestionSet":
        drop = set(slot_ids)
        return QuestionSet(list(self.q_intent), [q for q in self.q_slot if q.label_id not in drop],
                           {k: [s for s in v if s not in drop] for k, v in self.intent_slot_map.items()})

    def with_intent(self, question: Question, slots=()) -> "QuestionSet":
        m = dict(self.intent_slot_map)
        m[question.label_id] = list(slots)
        return QuestionSet(self.q_intent + [question], list(self.q_slot), m)

    def texts(self) -> list[str]:
        return [q.text for q in self.q_intent + self.q_slot]

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION,
                "intents": [{"id": q.label_id, "question": q.text} for q in self.q_intent],
                "slots": [{"id": q.label_id, "question": q.text} for q in self.q_slot],
                "intent_slot_map": {k: list(v) for k, v in self.intent_slot_map.items()}}

    @classmethod
    def from_json(cls, d: dict, source: str = "<memory>") -> "QuestionSet":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise QuestionSetError(f"{source}: unsupported schema_version {d.get('schema_version')!r}")
        try:
            qi = [Question(e["id"], "intent", e["question"]) for e in d["intents"]]
            qs = [Question(e["id"], "slot", e["question"]) for e in d["slots"]]
            m = {k: list(v) for k, v in d.get("intent_slot_map", {}).items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise QuestionSetError(f"{source}: malformed question entry ({exc})") from exc
        try:
            return cls(qi, qs, m)
        except QuestionSetError as exc:
            raise QuestionSetError(f"{source}: {exc}") from None


def save_question_set(qset: QuestionSet, path) -> None:
    Path(path).write_text(json.dumps(qset.to_json(), indent=2) + "\n")


def load_question_set(path) -> QuestionSet:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise QuestionSetError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return QuestionSet.from_json(d, str(path))


def load_descriptions(path) -> dict[str, str]:
    """LLM-completed descriptions: {"intents": {id: text}, "slots": {id: text}} flattened by kind."""
    d = json.loads(Path(path).read_text())
    return {f"{kind}:{k}": v for kind in ("intent", "slot") for k, v in d.get(kind + "s", {}).items()}


def question_set_from_labels(intents: list[SemanticLabel], slots: list[SemanticLabel],
                             intent_slot_map: dict) -> QuestionSet:
    return QuestionSet([question_from_description(l) for l in intents],
                       [question_from_description(l) for l in slots], intent_slot_map)


def question_set_for_corpus(spec) -> QuestionSet:
    """Questions for a synthetic corpus from its curated descriptions."""
    intents = [SemanticLabel(i.id, "intent", i.id, i.description) for i in spec.intents]
    slots = [SemanticLabel(s.id, "slot", s.id, s.description or s.noun) for s in spec.slots]
    return question_set_from_labels(intents, slots, {i.id: list(i.slots) for i in spec.intents})
