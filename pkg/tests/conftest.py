import numpy as np
import pytest

from zsslu import data, questions
from zsslu.model import ModelConfig, Transformer
from zsslu.training import foundation_vocabulary


def numeric_grad(f, t, h=1e-6, idx=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``t.data``."""
    g = np.zeros_like(t.data)
    it = [idx] if idx is not None else list(np.ndindex(*t.data.shape))
    for i in it:
        old = t.data[i]
        t.data[i] = old + h
        fp = f()
        t.data[i] = old - h
        fm = f()
        t.data[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def spec():
    return data.default_spec()


@pytest.fixture(scope="session")
def qset(spec):
    return questions.question_set_for_corpus(spec)


def tiny_model(spec, qset, seed=0, init_scale=0.02, **kw):
    """d_model=16, one encoder and one decoder layer; a larger ``init_scale`` gives well-conditioned gradients."""
    from zsslu.model import _init_params

    vocab = foundation_vocabulary(spec, qset)
    cfg = dict(vocab_size=len(vocab), d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=32,
               d_feat=spec.d_feat)
    cfg.update(kw)
    cfg = ModelConfig(**cfg)
    return Transformer(cfg, vocab, _init_params(cfg, np.random.default_rng(seed), init_scale))


@pytest.fixture
def model(spec, qset):
    return tiny_model(spec, qset)


def constructed_model(words, bigram, boosts, scale=50.0, strength=30.0):
    """One-layer decoder with hand-set weights and predictable answers.

    Tokens embed as one-hot rows; attention is uniform over the context and its
    value map moves each word in ``boosts`` (word -> (target, amount)) toward
    the target token; the feed-forward block is a bigram table ``bigram``
    (token -> next token). Positions and cross-attention contribute nothing.
    """
    from zsslu.model import _init_params
    from zsslu.model import Vocabulary as _Vocab

    vocab = _Vocab(words)
    V = len(vocab)
    d = V + (V % 2)
    cfg = ModelConfig(vocab_size=V, d_model=d, n_heads=1, n_enc_layers=1, n_dec_layers=1, d_ff=d,
                      max_positions=96, d_feat=4)
    p = {k: np.zeros_like(v) for k, v in _init_params(cfg, np.random.default_rng(0)).items()}
    for k in p:
        if k.endswith(".g"):
            p[k] = np.ones_like(p[k])
    eye = np.eye(d)
    p["dec.tok"] = scale * eye[:V]
    p["dec.0.self.o.w"] = eye.copy()
    p["dec.0.ff1.w"] = eye.copy()
    p["dec.lnf.g"] = np.full(d, 1.0 / scale)  # unit-scale logits: graded, unsaturated probabilities
    for word, (target, amount) in boosts.items():
        p["dec.0.self.v.w"][vocab.id(word), vocab.id(target)] = amount
    # a normalized one-hot row is a*e_c - b; the bias cancels the -b part so only the word's own row moves
    a = 1.0 / np.sqrt((1.0 / d) * (1.0 - 1.0 / d))
    p["dec.0.self.v.b"] = (a / d) * p["dec.0.self.v.w"].sum(axis=0)
    for a, b in bigram.items():
        p["dec.0.ff2.w"][vocab.id(a), vocab.id(b)] = strength
    return Transformer(cfg, vocab, p)
