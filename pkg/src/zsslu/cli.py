"""Command-line entry point: corpus and question generation, pretraining, training, evaluation, inference.

Every command that produces artifacts writes them under one run directory
together with ``config.json``, the resolved configuration (defaults, then
``--config`` file values, then explicit flags). Without ``--out`` the run
directory is ``$ZSSLU_OUTPUT_ROOT/<command>-<seed>`` (root defaults to ``runs``).

Failures print one JSON line ``{"error": kind, "message": ...}`` on stderr
and exit with a code per failure kind (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data, questions
from .metrics import evaluate, write_table
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig, run_pipeline, write_predictions
from .prefix import PrefixConfig, new_banks
from .training import PretrainConfig, TrainConfig, build_foundation, train

logger = logging.getLogger("zsslu")

OUTPUT_ROOT_ENV = "ZSSLU_OUTPUT_ROOT"
EXIT_CODES = {"usage": 2, "missing_file": 3, "invalid_config": 4, "runtime": 5}
ABLATIONS = ("none", "no-transcript", "no-asr-states")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers


def _out_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / f"{command}-{getattr(args, 'seed', 0)}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing_file", f"{what} not found: {p}")
    return p


def _resolve(args, defaults: dict, keys) -> dict:
    """defaults < --config file < flags that were given on the command line."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        path = _need_file(args.config, "config file")
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError("invalid_config", f"{path}:{exc.lineno}: {exc.msg}") from None
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise CliError("invalid_config", f"{path}: unknown keys {sorted(unknown)}")
        resolved.update(from_file)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            resolved[k] = v
    return resolved


def _write_config(out: Path, command: str, resolved: dict) -> None:
    cfg = {"command": command, **resolved}
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    logger.info("resolved config: %s", json.dumps(cfg, sort_keys=True))


def _load_corpus(path):
    _need_file(path, "corpus directory")
    try:
        return data.load_corpus(path)
    except FileNotFoundError as exc:
        raise CliError("missing_file", str(exc)) from None
    except (ValueError, TypeError, KeyError) as exc:
        raise CliError("invalid_config", f"{path}: {exc}") from None


def _load_questions(path):
    try:
        return questions.load_question_set(_need_file(path, "question set"))
    except questions.QuestionSetError as exc:
        raise CliError("invalid_config", str(exc)) from None


def _load_model(path):
    try:
        return load_checkpoint(_need_file(path, "checkpoint"))
    except (ValueError, KeyError) as exc:
        raise CliError("invalid_config", f"{path}: {exc}") from None


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(args) -> dict:
    defaults = {"spec": None, "sizes": [2000, 100, 100], "seed": 0}
    r = _resolve(args, defaults, ["spec", "sizes", "seed"])
    if r["spec"]:
        try:
            spec = data.CorpusSpec.load(_need_file(r["spec"], "corpus spec"))
        except (TypeError, ValueError, KeyError) as exc:
            raise CliError("invalid_config", f"{r['spec']}: {exc}") from None
    else:
        spec = data.default_spec()
    spec.split_seed = int(r["seed"])
    if len(r["sizes"]) != 3 or min(r["sizes"]) < 0:
        raise CliError("invalid_config", f"sizes must be three non-negative counts, got {r['sizes']}")
    try:
        corpus = data.generate_corpus(spec, tuple(r["sizes"]))
    except ValueError as exc:
        raise CliError("invalid_config", str(exc)) from None
    out = _out_dir(args, "gen-corpus")
    data.save_corpus(corpus, spec, out)
    _write_config(out, "gen-corpus", r)
    return {"out": str(out), **{k: len(v) for k, v in corpus.items()}}


def cmd_gen_questions(args) -> dict:
    defaults = {"corpus": None, "descriptions": None, "examples_per_label": 3}
    r = _resolve(args, defaults, ["corpus", "descriptions", "examples_per_label"])
    if not r["corpus"]:
        raise CliError("usage", "gen-questions needs --corpus")
    spec, corpus = _load_corpus(r["corpus"])
    examples = corpus.get("train", []) + corpus.get("dev", []) + corpus.get("test", [])
    intents = [questions.SemanticLabel(i.id, "intent", i.id, i.description) for i in spec.intents]
    slots = [questions.SemanticLabel(s.id, "slot", s.id, s.description or s.noun) for s in spec.slots]
    if r["descriptions"]:
        desc = questions.load_descriptions(_need_file(r["descriptions"], "descriptions file"))
        intents = [questions.SemanticLabel(l.id, l.kind, l.name, desc.get(f"intent:{l.id}", l.description))
                   for l in intents]
        slots = [questions.SemanticLabel(l.id, l.kind, l.name, desc.get(f"slot:{l.id}", l.description))
                 for l in slots]
    k = int(r["examples_per_label"])
    prompts = {}
    for label in intents:
        ex = [e.transcript for e in examples if e.intent == label.id][:k] or [label.description]
        prompts[label.id] = (label, questions.build_llm_prompts(label, ex))
    for label in slots:
        vals = sorted({v for e in examples for s, v in e.entities if s == label.id})[:k]
        prompts[label.id] = (label, questions.build_llm_prompts(label, vals or [label.description]))
    out = _out_dir(args, "gen-questions")
    qset = questions.question_set_from_labels(intents, slots, {i.id: list(i.slots) for i in spec.intents})
    questions.save_question_set(qset, out / "questions.json")
    questions.write_llm_prompts(prompts, out / "llm_prompts")
    _write_config(out, "gen-questions", r)
    return {"out": str(out), "intents": len(qset.q_intent), "slots": len(qset.q_slot)}


def cmd_pretrain(args) -> dict:
    defaults = {"corpus": None, "questions": None, "steps": PretrainConfig.steps,
                "batch_size": PretrainConfig.batch_size, "lr": PretrainConfig.lr, "sentences": 6000, "seed": 0}
    r = _resolve(args, defaults, list(defaults))
    if not (r["corpus"] and r["questions"]):
        raise CliError("usage", "pretrain needs --corpus and --questions")
    spec, corpus = _load_corpus(r["corpus"])
    qset = _load_questions(r["questions"])
    exclude = [e.transcript for name in ("dev", "test") for e in corpus.get(name, [])]
    out = _out_dir(args, "pretrain")
    _write_config(out, "pretrain", r)
    cfg = PretrainConfig(steps=int(r["steps"]), batch_size=int(r["batch_size"]), lr=float(r["lr"]))
    model = build_foundation(spec, qset, config=cfg, n_sentences=int(r["sentences"]), exclude=exclude,
                             seed=int(r["seed"]))
    save_checkpoint(out / "base.npz", model, None, {"kind": "base", "seed": int(r["seed"])})
    return {"out": str(out), "checkpoint": str(out / "base.npz"), "parameters": model.parameter_count()}


def cmd_train(args) -> dict:
    t = TrainConfig()
    defaults = {"corpus": None, "questions": None, "base": None, "seed": 0, "epochs": t.epochs,
                "batch_size": t.batch_size, "n_negatives": t.n_negatives, "lr": t.base_lr,
                "weight_decay": t.weight_decay, "max_steps": None, "state_source": t.state_source,
                "prefix_length": PrefixConfig.per_task_length, "task_masking": False, "no_encoder_prefix": False,
                "eval_dev": True}
    r = _resolve(args, defaults, list(defaults))
    if not (r["corpus"] and r["questions"] and r["base"]):
        raise CliError("usage", "train needs --corpus, --questions and --base")
    if r["state_source"] not in ("gold", "greedy"):
        raise CliError("invalid_config", f"state_source must be gold or greedy, got {r['state_source']!r}")
    spec, corpus = _load_corpus(r["corpus"])
    if "train" not in corpus:
        raise CliError("missing_file", f"{r['corpus']}: no train.jsonl")
    qset = _load_questions(r["questions"]).without_slots(spec.held_out_slots)
    model, _, _ = _load_model(r["base"])
    data.featurize_corpus(corpus, spec)
    pcfg = PrefixConfig(per_task_length=int(r["prefix_length"]), encoder_enabled=not r["no_encoder_prefix"],
                        task_masking=bool(r["task_masking"]))
    seed = int(r["seed"])
    banks = new_banks(pcfg, model.config, rng=np.random.default_rng([seed, 0]))
    cfg = TrainConfig(epochs=int(r["epochs"]), batch_size=int(r["batch_size"]), n_negatives=int(r["n_negatives"]),
                      base_lr=float(r["lr"]), weight_decay=float(r["weight_decay"]),
                      state_source=r["state_source"], max_steps=r["max_steps"], eval_every_epoch=bool(r["eval_dev"]))
    out = _out_dir(args, "train")
    _write_config(out, "train", r)
    res = train(model, banks, corpus["train"], qset, cfg, np.random.default_rng([seed, 1]),
                dev=corpus.get("dev"), run_dir=out, dev_slots=spec.seen_slots)
    return {"out": str(out), "steps": res.steps, "best_epoch": res.best_epoch,
            "final_train_loss": res.log[-1]["train_loss"] if res.log else None}


def _pipeline_config(ablation: str, intent_batch: bool = False) -> PipelineConfig:
    return PipelineConfig.for_ablation(ablation, intent_batch=intent_batch)


def cmd_eval(args) -> dict:
    defaults = {"checkpoint": None, "corpus": None, "questions": None, "split": "test", "ablation": "none",
                "slots": "held-out", "seed": 0}
    r = _resolve(args, defaults, list(defaults))
    if not (r["checkpoint"] and r["corpus"] and r["questions"]):
        raise CliError("usage", "eval needs --checkpoint, --corpus and --questions")
    if r["ablation"] not in ABLATIONS:
        raise CliError("invalid_config", f"ablation must be one of {list(ABLATIONS)}, got {r['ablation']!r}")
    spec, corpus = _load_corpus(r["corpus"])
    if r["split"] not in corpus:
        raise CliError("missing_file", f"{r['corpus']}: no {r['split']}.jsonl")
    model, banks, _ = _load_model(r["checkpoint"])
    qset = _load_questions(r["questions"])
    data.featurize_corpus(corpus, spec, int(r["seed"]))
    examples = corpus[r["split"]]
    slot_filter = {"all": None, "held-out": spec.held_out_slots, "seen": spec.seen_slots}.get(r["slots"], "bad")
    if slot_filter == "bad":
        raise CliError("invalid_config", f"slots must be all, held-out or seen, got {r['slots']!r}")
    pcfg = _pipeline_config(r["ablation"])
    preds = [run_pipeline(ex.features, model, banks, qset, pcfg) for ex in examples]
    report = evaluate(examples, preds, slot_filter)
    out = _out_dir(args, "eval")
    _write_config(out, "eval", r)
    report.save(out / "report.json")
    write_predictions(preds, out / "predictions.jsonl", [ex.id for ex in examples])
    write_table({r["ablation"]: report}, out / "table.csv")
    return {"out": str(out), **report.table_row()}


def cmd_infer(args) -> dict:
    if not args.checkpoint or not args.questions:
        raise CliError("usage", "infer needs --checkpoint and --questions")
    if bool(args.transcript) == bool(args.id):
        raise CliError("usage", "infer needs exactly one of --transcript or --id")
    if args.ablation not in ABLATIONS:
        raise CliError("invalid_config", f"ablation must be one of {list(ABLATIONS)}")
    model, banks, _ = _load_model(args.checkpoint)
    qset = _load_questions(args.questions)
    if args.id:
        if not args.corpus:
            raise CliError("usage", "--id needs --corpus")
        spec, corpus = _load_corpus(args.corpus)
        found = [ex for split in corpus.values() for ex in split if ex.id == args.id]
        if not found:
            raise CliError("invalid_config", f"utterance {args.id!r} not in {args.corpus}")
        text = found[0].transcript
    else:
        spec = data.CorpusSpec.load(_need_file(args.spec, "corpus spec")) if args.spec else data.default_spec()
        text = args.transcript
    feats = data.featurize(text, spec, np.random.default_rng(args.seed))
    pred = run_pipeline(feats, model, banks, qset, _pipeline_config(args.ablation))
    return pred.to_json(args.id)


def cmd_inspect(args) -> dict:
    model, banks, extra = _load_model(args.checkpoint)
    info = {"config": model.config.__dict__, "vocab_size": len(model.vocab) if model.vocab else None,
            "base_parameters": model.parameter_count(), "base_checksum": model.checksum(), "extra": extra}
    if banks is not None:
        info["prefix"] = {"config": banks.config.to_dict(),
                          "parameters": sum(t.data.size for t in banks.tensors()),
                          "encoder_length": banks.encoder.length if banks.encoder else 0,
                          "decoder_length": banks.decoder.length if banks.decoder else 0}
    return info


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zsslu", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="generate a synthetic zero-shot corpus")
    g.add_argument("--spec", help="CorpusSpec JSON (default: built-in spec)")
    g.add_argument("--sizes", type=int, nargs=3, metavar=("TRAIN", "DEV", "TEST"))
    g.add_argument("--seed", type=int, help="split seed")

    q = sub.add_parser("gen-questions", help="questions from label descriptions, plus LLM prompt files")
    q.add_argument("--corpus")
    q.add_argument("--descriptions", help='JSON {"intents": {id: text}, "slots": {id: text}} of LLM answers')
    q.add_argument("--examples-per-label", dest="examples_per_label", type=int)

    pt = sub.add_parser("pretrain", help="pretrain the base model on unlabelled sentences")
    pt.add_argument("--corpus")
    pt.add_argument("--questions")
    pt.add_argument("--steps", type=int)
    pt.add_argument("--batch-size", dest="batch_size", type=int)
    pt.add_argument("--lr", type=float)
    pt.add_argument("--sentences", type=int)
    pt.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="prefix-tune a frozen base model")
    t.add_argument("--corpus")
    t.add_argument("--questions")
    t.add_argument("--base", help="base checkpoint from `pretrain`")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--n-negatives", dest="n_negatives", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--state-source", dest="state_source", choices=["gold", "greedy"])
    t.add_argument("--prefix-length", dest="prefix_length", type=int, help="prefix rows per task")
    t.add_argument("--task-masking", dest="task_masking", action="store_true", default=None)
    t.add_argument("--no-encoder-prefix", dest="no_encoder_prefix", action="store_true", default=None)
    t.add_argument("--no-eval-dev", dest="eval_dev", action="store_false", default=None)

    e = sub.add_parser("eval", help="decode a split and score it")
    e.add_argument("--checkpoint")
    e.add_argument("--corpus")
    e.add_argument("--questions")
    e.add_argument("--split")
    e.add_argument("--ablation", choices=ABLATIONS)
    e.add_argument("--slots", choices=["all", "held-out", "seen"], help="entity types scored")
    e.add_argument("--seed", type=int, help="feature noise seed")

    i = sub.add_parser("infer", help="decode one utterance and print its prediction as JSON")
    i.add_argument("--checkpoint")
    i.add_argument("--questions")
    i.add_argument("--transcript", help="text rendered to pseudo-speech features")
    i.add_argument("--id", help="utterance id from --corpus")
    i.add_argument("--corpus")
    i.add_argument("--spec", help="CorpusSpec JSON for featurizing --transcript")
    i.add_argument("--ablation", choices=ABLATIONS, default="none")
    i.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary")
    c.add_argument("checkpoint")

    for sp in (g, q, pt, t, e):
        sp.add_argument("--config", help="JSON file of option values; explicit flags win")
        sp.add_argument("--out", help=f"run directory (default: ${OUTPUT_ROOT_ENV}/<command>-<seed>)")
    return p


COMMANDS = {"gen-corpus": cmd_gen_corpus, "gen-questions": cmd_gen_questions, "pretrain": cmd_pretrain,
            "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "inspect-checkpoint": cmd_inspect}


def _error_line(kind: str, message: str) -> str:
    return json.dumps({"error": kind, "message": " ".join(str(message).split())})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise CliError("usage", "a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
        result = COMMANDS[args.command](args)
    except CliError as exc:
        print(_error_line(exc.kind, exc), file=sys.stderr)
        return EXIT_CODES[exc.kind]
    except (OSError, FloatingPointError, ValueError, KeyError) as exc:
        print(_error_line("runtime", f"{type(exc).__name__}: {exc}"), file=sys.stderr)
        return EXIT_CODES["runtime"]
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
