"""Zero-shot spoken language understanding by prefix-tuned question answering over cached ASR states."""

from .data import CorpusSpec, SLUExample, default_spec, featurize, generate_corpus, load_slurp_jsonl
from .metrics import EvalReport, evaluate, slu_f1, wer
from .model import ModelConfig, Transformer, Vocabulary, load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig, SLUPrediction, run_pipeline
from .prefix import PrefixBanks, PrefixConfig, new_banks
from .questions import Question, QuestionSet, load_question_set, save_question_set
from .training import TrainConfig, build_foundation, train

__version__ = "0.1.0"

__all__ = [
    "CorpusSpec", "EvalReport", "ModelConfig", "PipelineConfig", "PrefixBanks", "PrefixConfig", "Question",
    "QuestionSet", "SLUExample", "SLUPrediction", "TrainConfig", "Transformer", "Vocabulary", "build_foundation",
    "default_spec", "evaluate", "featurize", "generate_corpus", "load_checkpoint", "load_question_set",
    "load_slurp_jsonl", "new_banks", "run_pipeline", "save_checkpoint", "save_question_set", "slu_f1", "train",
    "wer",
]
