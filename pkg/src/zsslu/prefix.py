"""Trainable key/value prefixes for self-attention and their injection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import ShapeError, Tensor, concat, expand

TASKS = ("asr", "intent", "slot")


@dataclass
class PrefixConfig:
    per_task_length: int = 10
    tasks: tuple = TASKS
    encoder_enabled: bool = True
    # When set, each SLU task sees only the ASR block plus its own block of decoder prefixes.
    task_masking: bool = False

    @property
    def encoder_length(self) -> int:
        return self.per_task_length

    @property
    def decoder_length(self) -> int:
        return self.per_task_length * len(self.tasks)

    def to_dict(self) -> dict:
        return {"per_task_length": self.per_task_length, "tasks": list(self.tasks),
                "encoder_enabled": self.encoder_enabled, "task_masking": self.task_masking}

    @classmethod
    def from_dict(cls, d: dict) -> "PrefixConfig":
        return cls(d["per_task_length"], tuple(d["tasks"]), d["encoder_enabled"], d.get("task_masking", False))


@dataclass(eq=False)
class PrefixBank:
    """Per-layer (p_K, p_V) pairs for one attention site."""

    site: str
    keys: list
    values: list
    tasks: tuple = TASKS
    task_masking: bool = False

    def __post_init__(self):
        if self.site not in ("encoder-self", "decoder-self"):
            raise ValueError(f"unknown prefix site {self.site!r}")
        if len(self.keys) != len(self.values):
            raise ValueError("prefix keys and values disagree on layer count")
        lengths = {t.shape[0] for t in self.keys} | {t.shape[0] for t in self.values}
        if len(lengths) > 1:
            raise ValueError(f"prefix lengths differ across layers: {sorted(lengths)}")

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def length(self) -> int:
        return self.keys[0].shape[0] if self.keys else 0

    @property
    def d_model(self) -> int:
        return self.keys[0].shape[1] if self.keys else 0

    def tensors(self) -> list:
        out = []
        for k, v in zip(self.keys, self.values):
            out.extend((k, v))
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def visible(self, task: str | None) -> np.ndarray:
        """Boolean mask over prefix rows visible to ``task``."""
        mask = np.ones(self.length, dtype=bool)
        if not self.task_masking or task is None or self.length == 0:
            return mask
        block = self.length // len(self.tasks)
        mask[:] = False
        for t in {"asr", task}:
            i = self.tasks.index(t)
            mask[i * block:(i + 1) * block] = True
        return mask


@dataclass
class PrefixBanks:
    encoder: PrefixBank | None = None
    decoder: PrefixBank | None = None
    config: PrefixConfig = field(default_factory=PrefixConfig)

    @property
    def active_encoder(self) -> PrefixBank | None:
        return self.encoder if self.config.encoder_enabled else None

    def tensors(self) -> list:
        out = []
        for bank in (self.encoder, self.decoder):
            if bank is not None:
                out.extend(bank.tensors())
        return out


def inject(k: Tensor, v: Tensor, bank: PrefixBank | None, layer: int) -> tuple[Tensor, Tensor]:
    """Prepend the layer's prefix rows to keys and values along the sequence axis."""
    if bank is None or bank.length == 0:
        return k, v
    if not 0 <= layer < bank.n_layers:
        raise IndexError(f"layer {layer} outside prefix bank of depth {bank.n_layers}")
    pk, pv = bank.keys[layer], bank.values[layer]
    if k.shape[-1] != pk.shape[1] or v.shape[-1] != pv.shape[1]:
        raise ShapeError(f"prefix width {pk.shape[1]} does not match key/value width {k.shape[-1]}")
    if k.ndim == 3:
        pk, pv = expand(pk, k.shape[0]), expand(pv, k.shape[0])
    axis = k.ndim - 2
    return concat([pk, k], axis=axis), concat([pv, v], axis=axis)


def new_bank(site: str, n_layers: int, length: int, d_model: int, init_scale: float = 0.02,
             rng: np.random.Generator | None = None, **kw) -> PrefixBank:
    if length < 0 or n_layers < 0:
        raise ValueError("prefix length and layer count must be non-negative")
    rng = np.random.default_rng(0) if rng is None else rng
    keys, values = [], []
    for i in range(n_layers):
        keys.append(Tensor(rng.normal(0.0, 1.0, (length, d_model)) * init_scale, requires_grad=True,
                           name=f"{site}.{i}.k"))
        values.append(Tensor(rng.normal(0.0, 1.0, (length, d_model)) * init_scale, requires_grad=True,
                             name=f"{site}.{i}.v"))
    return PrefixBank(site, keys, values, **kw)


def new_banks(config: PrefixConfig, model_config, init_scale: float = 0.02,
              rng: np.random.Generator | None = None) -> PrefixBanks:
    rng = np.random.default_rng(0) if rng is None else rng
    enc = new_bank("encoder-self", model_config.n_enc_layers, config.encoder_length,
                   model_config.d_model, init_scale, rng)
    dec = new_bank("decoder-self", model_config.n_dec_layers, config.decoder_length,
                   model_config.d_model, init_scale, rng, tasks=tuple(config.tasks),
                   task_masking=config.task_masking)
    return PrefixBanks(enc, dec, config)


def trainable_parameters(model, banks: PrefixBanks | Iterable[PrefixBank] | None) -> list:
    """The prefix tensors; the base model contributes nothing."""
    if banks is None:
        return []
    if isinstance(banks, PrefixBanks):
        return banks.tensors()
    out = []
    for b in banks:
        if b is not None:
            out.extend(b.tensors())
    return out
