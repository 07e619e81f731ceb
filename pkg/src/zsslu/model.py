"""Small pre-norm encoder-decoder transformer with an incremental decode cache."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .prefix import PrefixBank, PrefixBanks, PrefixConfig, inject
from .tensor import Tensor

CHECKPOINT_FORMAT = 1

SOT, EOT, PAD, UNK = "<sot>", "<eot>", "<pad>", "<unk>"
SPECIALS = (PAD, SOT, EOT, UNK)
_TOKEN_RE = re.compile(r"[^\s?.,!]+|[?.,!]")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 256
    max_positions: int = 96
    d_feat: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if min(self.vocab_size, self.d_model, self.d_ff, self.max_positions, self.d_feat) <= 0:
            raise ValueError("model extents must be positive")


class Vocabulary:
    """Closed word-level vocabulary; "Yes" and "No" are ordinary words."""

    def __init__(self, words):
        self.tokens: list[str] = list(SPECIALS)
        for w in words:
            if w not in SPECIALS and w not in self.tokens:
                self.tokens.append(w)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_texts(cls, texts, extra=()) -> "Vocabulary":
        words = set(extra)
        for t in texts:
            words.update(tokenize(t))
        return cls(sorted(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def sot(self) -> int:
        return self.index[SOT]

    @property
    def eot(self) -> int:
        return self.index[EOT]

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def unk(self) -> int:
        return self.index[UNK]

    def id(self, word: str) -> int:
        return self.index.get(word, self.unk)

    def encode(self, text: str) -> list[int]:
        return [self.id(w) for w in tokenize(text)]

    def decode(self, ids) -> str:
        words = [self.tokens[i] for i in ids if self.tokens[i] not in SPECIALS]
        return detokenize(words)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def detokenize(words) -> str:
    out = ""
    for w in words:
        out += w if (w in "?.,!" and out) else (" " + w if out else w)
    return out


@dataclass
class EncoderOutput:
    states: Tensor
    valid: np.ndarray | None = None

    def __post_init__(self):
        if self.valid is None:
            lead = self.states.shape[:-1]
            self.valid = np.ones(lead, dtype=bool)


@dataclass
class DecoderState:
    """Self-attention keys/values per decoder layer for every token fed so far."""

    layers: list = field(default_factory=list)
    tokens: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.tokens)

    def row_counts(self) -> list[int]:
        return [k.shape[0] for k, _ in self.layers]


@dataclass
class GreedyResult:
    tokens: list
    probs: list
    logprob: float
    complete: bool
    state: DecoderState

    @property
    def truncated(self) -> bool:
        return not self.complete


def _init_params(cfg: ModelConfig, rng: np.random.Generator, scale: float = 0.02) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    p: dict[str, np.ndarray] = {}

    def lin(name, n_in, n_out, bias=True):
        p[name + ".w"] = rng.normal(0.0, scale, (n_in, n_out))
        if bias:
            p[name + ".b"] = np.zeros(n_out)

    def ln(name):
        p[name + ".g"] = np.ones(d)
        p[name + ".b"] = np.zeros(d)

    def attn(name):
        lin(name + ".q", d, d)
        lin(name + ".k", d, d, bias=False)
        lin(name + ".v", d, d)
        lin(name + ".o", d, d)

    lin("enc.in", cfg.d_feat, d)
    p["enc.pos"] = rng.normal(0.0, scale, (cfg.max_positions, d))
    for i in range(cfg.n_enc_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.self")
        ln(f"enc.{i}.ln2")
        lin(f"enc.{i}.ff1", d, f)
        lin(f"enc.{i}.ff2", f, d)
    ln("enc.lnf")
    p["dec.tok"] = rng.normal(0.0, scale, (cfg.vocab_size, d))
    p["dec.pos"] = rng.normal(0.0, scale, (cfg.max_positions, d))
    for i in range(cfg.n_dec_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3")
        lin(f"dec.{i}.ff1", d, f)
        lin(f"dec.{i}.ff2", f, d)
    ln("dec.lnf")
    return p


class Transformer:
    """Encoder-decoder transformer; output projection is tied to the token table."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary | None = None, params: dict | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config
        self.vocab = vocab
        if params is None:
            params = _init_params(config, np.random.default_rng(0) if rng is None else rng)
        self.params: dict[str, Tensor] = {k: (v if isinstance(v, Tensor) else Tensor(v, name=k))
                                          for k, v in params.items()}
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} entries, config says {config.vocab_size}")

    # ------------------------------------------------------------ parameters

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------ blocks

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return T.linear(x, self.params[name + ".w"], self.params.get(name + ".b"))

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _ffn(self, x: Tensor, name: str) -> Tensor:
        return self._lin(T.gelu(self._lin(x, name + ".ff1")), name + ".ff2")

    # ------------------------------------------------------------ encoder

    def encode(self, features, encoder_prefixes: PrefixBank | None = None,
               valid: np.ndarray | None = None) -> EncoderOutput:
        """Encode (T, d_feat) or padded (B, T, d_feat) features."""
        cfg = self.config
        x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
        if x.shape[-1] != cfg.d_feat:
            raise T.ShapeError(f"feature width {x.shape[-1]} does not match d_feat={cfg.d_feat}")
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        B, n, _ = x.shape
        if n > cfg.max_positions:
            raise ValueError(f"{n} frames exceed max_positions={cfg.max_positions}")
        if n == 0:
            raise ValueError("cannot encode an empty feature sequence")
        valid = np.ones((B, n), dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(B, n)
        pos = T.gather(self.params["enc.pos"], np.arange(n))
        h = T.add(self._lin(x, "enc.in"), pos)
        lp = 0 if encoder_prefixes is None else encoder_prefixes.length
        mask = np.concatenate([np.ones((B, n, lp), dtype=bool),
                               np.broadcast_to(valid[:, None, :], (B, n, n))], axis=2)
        for i in range(cfg.n_enc_layers):
            name = f"enc.{i}"
            a = self._ln(h, name + ".ln1")
            q = self._lin(a, name + ".self.q")
            k, v = inject(self._lin(a, name + ".self.k"), self._lin(a, name + ".self.v"), encoder_prefixes, i)
            h = T.add(h, self._lin(T.attention(q, k, v, mask, cfg.n_heads), name + ".self.o"))
            h = T.add(h, self._ffn(self._ln(h, name + ".ln2"), name))
        h = self._ln(h, "enc.lnf")
        if squeeze:
            return EncoderOutput(T.reshape(h, h.shape[1:]), valid[0])
        return EncoderOutput(h, valid)

    # ------------------------------------------------------------ decoder

    def decoder_forward(self, tokens, positions, past=None, past_valid=None, enc: EncoderOutput | None = None,
                        use_cross_attention: bool = True, prefixes: PrefixBank | None = None,
                        prefix_visible: np.ndarray | None = None):
        """Batched decoder pass over new tokens.

        tokens, positions: int (B, L). past: per-layer (K, V) tensors (B, P, d)
        with validity ``past_valid`` (B, P). Returns logits (B, L, V) and the
        per-layer (K, V) rows (B, L, d) of the new tokens.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        B, L = tokens.shape
        if positions.size and positions.max() >= cfg.max_positions:
            raise ValueError(f"position {positions.max()} exceeds max_positions={cfg.max_positions}")
        if past is not None and len(past) != cfg.n_dec_layers:
            raise ValueError(f"cache has {len(past)} layers, model has {cfg.n_dec_layers}")
        if use_cross_attention and enc is None:
            raise ValueError("cross-attention requested without encoder output")
        P = 0 if past is None else past[0][0].shape[1]
        lp = 0 if prefixes is None else prefixes.length
        pvis = np.ones(lp, dtype=bool) if prefix_visible is None else np.asarray(prefix_visible, dtype=bool)
        pv = np.ones((B, P), dtype=bool) if past_valid is None else np.asarray(past_valid, dtype=bool)
        causal = np.tril(np.ones((L, L), dtype=bool))
        pvis = pvis[:, None, :] if pvis.ndim == 2 else pvis
        mask = np.concatenate([np.broadcast_to(pvis, (B, L, lp)),
                               np.broadcast_to(pv[:, None, :], (B, L, P)),
                               np.broadcast_to(causal, (B, L, L))], axis=2)
        x = T.add(T.gather(self.params["dec.tok"], tokens), T.gather(self.params["dec.pos"], positions))
        if use_cross_attention:
            enc_states = enc.states if enc.states.ndim == 3 else T.reshape(enc.states, (1,) + enc.states.shape)
            ev = np.asarray(enc.valid, dtype=bool).reshape(enc_states.shape[:2])
            if enc_states.shape[0] != B:
                raise ValueError(f"encoder batch {enc_states.shape[0]} does not match decoder batch {B}")
            cmask = np.broadcast_to(ev[:, None, :], (B, L, ev.shape[1]))
        new_kv = []
        for i in range(cfg.n_dec_layers):
            name = f"dec.{i}"
            a = self._ln(x, name + ".ln1")
            q = self._lin(a, name + ".self.q")
            k_new = self._lin(a, name + ".self.k")
            v_new = self._lin(a, name + ".self.v")
            new_kv.append((k_new, v_new))
            k, v = k_new, v_new
            if P:
                k = T.concat([past[i][0], k], axis=1)
                v = T.concat([past[i][1], v], axis=1)
            k, v = inject(k, v, prefixes, i)
            x = T.add(x, self._lin(T.attention(q, k, v, mask, cfg.n_heads), name + ".self.o"))
            if use_cross_attention:
                c = self._ln(x, name + ".ln2")
                cq = self._lin(c, name + ".cross.q")
                ck = self._lin(enc_states, name + ".cross.k")
                cv = self._lin(enc_states, name + ".cross.v")
                x = T.add(x, self._lin(T.attention(cq, ck, cv, cmask, cfg.n_heads), name + ".cross.o"))
            x = T.add(x, self._ffn(self._ln(x, name + ".ln3"), name))
        x = self._ln(x, "dec.lnf")
        logits = T.matmul(x, T.transpose(self.params["dec.tok"]))
        return logits, new_kv

    def decode_step(self, token_ids, cache: DecoderState | None = None, enc_out: EncoderOutput | None = None,
                    decoder_prefixes: PrefixBank | None = None, use_cross_attention: bool = True,
                    position_offset: int | None = None, task: str | None = None):
        """Feed new tokens after ``cache``; returns (logits (n_new, V), extended copy of the cache)."""
        cfg = self.config
        cache = DecoderState([], []) if cache is None else cache
        if cache.layers and len(cache.layers) != cfg.n_dec_layers:
            raise ValueError(f"cache has {len(cache.layers)} layers, model has {cfg.n_dec_layers}")
        ids = [int(t) for t in token_ids]
        if not ids:
            return Tensor(np.zeros((0, cfg.vocab_size))), cache
        offset = cache.length if position_offset is None else position_offset
        if offset + len(ids) > cfg.max_positions:
            raise ValueError(f"positions up to {offset + len(ids)} exceed max_positions={cfg.max_positions}")
        past = None
        if cache.layers:
            past = [(Tensor(k[None]), Tensor(v[None])) for k, v in cache.layers]
        enc = None
        if use_cross_attention:
            if enc_out is None:
                raise ValueError("cross-attention requested without encoder output")
            enc = enc_out
        vis = decoder_prefixes.visible(task) if decoder_prefixes is not None else None
        logits, kv = self.decoder_forward(np.array([ids]), np.arange(offset, offset + len(ids))[None],
                                          past, None, enc, use_cross_attention, decoder_prefixes, vis)
        layers = []
        for i, (k, v) in enumerate(kv):
            if cache.layers:
                layers.append((np.concatenate([cache.layers[i][0], k.data[0]]),
                               np.concatenate([cache.layers[i][1], v.data[0]])))
            else:
                layers.append((k.data[0], v.data[0]))
        return Tensor(logits.data[0]), DecoderState(layers, cache.tokens + ids)

    def greedy_decode(self, cache: DecoderState | None, start_tokens, eot: int, max_len: int,
                      enc_out: EncoderOutput | None = None, decoder_prefixes: PrefixBank | None = None,
                      use_cross_attention: bool = True, position_offset: int | None = None,
                      task: str | None = None) -> GreedyResult:
        """Argmax decoding until ``eot`` or ``max_len`` emitted tokens.

        The returned state holds rows for the start tokens and every emitted
        token except the terminating ``eot``.
        """
        cache = DecoderState([], []) if cache is None else cache
        offset = cache.length if position_offset is None else position_offset
        logits, state = self.decode_step(start_tokens, cache, enc_out, decoder_prefixes, use_cross_attention,
                                         offset, task)
        offset += len(start_tokens)
        out, probs, logprob = [], [], 0.0
        row = logits.data[-1]
        for step in range(max_len):
            z = row - row.max()
            lp = z - np.log(np.exp(z).sum())
            tok = int(np.argmax(row))
            logprob += float(lp[tok])
            probs.append(float(np.exp(lp[tok])))
            if tok == eot:
                return GreedyResult(out, probs, logprob, True, state)
            out.append(tok)
            if step == max_len - 1 or offset >= self.config.max_positions:
                break
            logits, state = self.decode_step([tok], state, enc_out, decoder_prefixes, use_cross_attention,
                                             offset, task)
            offset += 1
            row = logits.data[-1]
        return GreedyResult(out, probs, logprob, False, state)


def attention(q, k, v, mask=None, n_heads: int = 1) -> Tensor:
    """Scaled dot-product attention on plain arrays or tensors."""
    return T.attention(T.as_tensor(q), T.as_tensor(k), T.as_tensor(v), mask, n_heads)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: Transformer, banks: PrefixBanks | None = None, extra: dict | None = None) -> None:
    """Write config, vocabulary, base parameters and prefix banks to one ``.npz`` file."""
    meta = {"format": CHECKPOINT_FORMAT, "config": asdict(model.config),
            "vocab": model.vocab.tokens if model.vocab is not None else None, "extra": extra or {}}
    arrays = {f"base/{k}": v.data for k, v in model.params.items()}
    if banks is not None:
        meta["prefix"] = banks.config.to_dict()
        for bank in (banks.encoder, banks.decoder):
            if bank is None:
                continue
            for i, (k, v) in enumerate(zip(bank.keys, bank.values)):
                arrays[f"prefix/{bank.site}/{i}/k"] = k.data
                arrays[f"prefix/{bank.site}/{i}/v"] = v.data
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _read_npz(path):
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return meta, arrays


def load_banks(path) -> PrefixBanks | None:
    meta, arrays = _read_npz(path)
    if "prefix" not in meta:
        return None
    pcfg = PrefixConfig.from_dict(meta["prefix"])
    banks = PrefixBanks(config=pcfg)
    for site, attr in (("encoder-self", "encoder"), ("decoder-self", "decoder")):
        i, keys, values = 0, [], []
        while f"prefix/{site}/{i}/k" in arrays:
            keys.append(Tensor(arrays[f"prefix/{site}/{i}/k"], requires_grad=True))
            values.append(Tensor(arrays[f"prefix/{site}/{i}/v"], requires_grad=True))
            i += 1
        if keys:
            setattr(banks, attr, PrefixBank(site, keys, values, tuple(pcfg.tasks), pcfg.task_masking))
    return banks


def load_checkpoint(path) -> tuple[Transformer, PrefixBanks | None, dict]:
    meta, arrays = _read_npz(path)
    cfg = ModelConfig(**meta["config"])
    vocab = Vocabulary(meta["vocab"][len(SPECIALS):]) if meta["vocab"] is not None else None
    params = {k[len("base/"):]: v for k, v in arrays.items() if k.startswith("base/")}
    model = Transformer(cfg, vocab, params)
    return model, load_banks(path), meta.get("extra", {})
