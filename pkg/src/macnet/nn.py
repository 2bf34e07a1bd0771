"""Layers used by the input and output units."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    concat,
    getitem,
    hadamard,
    linear,
    lstm_scan,
    parameter,
    take_rows,
)

EMBED_DIM = 300


class VocabError(IndexError):
    pass


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias_init: float = 0.0):
        self.W = parameter(xavier_uniform(rng, out_dim, in_dim))
        self.b = parameter(np.full(out_dim, bias_init))

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.b)


class Embedding(Module):
    def __init__(self, vocab_size: int, rng: np.random.Generator, dim: int = EMBED_DIM):
        self.table = parameter(rng.uniform(-1.0, 1.0, size=(vocab_size, dim)))

    def __call__(self, tokens) -> Tensor:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise VocabError(f"token id outside vocabulary of size {self.table.shape[0]}")
        if ids.size == 0:
            return Tensor(np.zeros(ids.shape + (self.table.shape[1],)))
        return take_rows(self.table, ids)


class LstmDirection(Module):
    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0):
        self.W = parameter(xavier_uniform(rng, 4 * hidden, in_dim))
        self.U = parameter(xavier_uniform(rng, 4 * hidden, hidden))
        b = np.zeros(4 * hidden)  # gates: input, forget, output, candidate
        b[hidden:2 * hidden] = forget_bias
        self.b = parameter(b)

    @property
    def hidden(self) -> int:
        return self.U.shape[1]


class BiLstm(Module):
    """Bidirectional LSTM with ``d // 2`` hidden units per direction."""

    def __init__(self, in_dim: int, d: int, rng: np.random.Generator):
        if d % 2:
            raise ValueError(f"biLSTM width must be even, got {d}")
        self.fwd = LstmDirection(in_dim, d // 2, rng)
        self.bwd = LstmDirection(in_dim, d // 2, rng)

    def __call__(self, x: Tensor, mask=None, recurrent_masks=None) -> tuple[Tensor, Tensor]:
        """Return contextual words [B x S x d] and the question vector [B x d].

        ``x`` is [B x S x in] (or [S x in] for a single sequence, in which case
        outputs drop the batch axis). Padded positions are marked 0 in ``mask``.
        """
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
            mask = None if mask is None else np.asarray(mask)[None]
        if x.shape[1] == 0:
            raise ContractError("biLSTM needs at least one token")
        rf, rb = (None, None) if recurrent_masks is None else recurrent_masks
        hf = lstm_scan(x, self.fwd.W, self.fwd.U, self.fwd.b, mask, reverse=False, recurrent_mask=rf)
        hb = lstm_scan(x, self.bwd.W, self.bwd.U, self.bwd.b, mask, reverse=True, recurrent_mask=rb)
        cw = concat([hf, hb], axis=-1)
        # forward state carries through trailing padding, so the last column is
        # each sequence's final forward state
        q = concat([getitem(hb, (slice(None), 0)), getitem(hf, (slice(None), -1))], axis=-1)
        if single:
            return cw.reshape(cw.shape[1:]), q.reshape(q.shape[1:])
        return cw, q


@dataclass
class DropoutMask:
    """A per-example feature mask reused at every position it covers."""

    keep_prob: float
    mask: np.ndarray
    seed: int | None = None

    @classmethod
    def draw(cls, shape, keep_prob: float, rng: np.random.Generator, seed: int | None = None):
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError(f"keep probability must be in (0, 1], got {keep_prob}")
        if keep_prob == 1.0:
            return cls(keep_prob, np.ones(shape), seed)
        keep = rng.random(shape) < keep_prob
        return cls(keep_prob, keep / keep_prob, seed)


def dropout_apply(x: Tensor, mask: DropoutMask | None, training: bool) -> Tensor:
    """Scale ``x`` by a variational mask.

    The mask is [B x F] for ``x`` of shape [B x F] or [B x ... x F]; it is
    broadcast over every middle axis.
    """
    if not training or mask is None or mask.keep_prob == 1.0:
        return x
    m = mask.mask
    if m.shape[-1] != x.shape[-1] or m.shape[0] != x.shape[0]:
        raise DimensionError(f"dropout mask {m.shape} does not fit input {x.shape}")
    if x.ndim > m.ndim:
        m = m.reshape(m.shape[0], *([1] * (x.ndim - m.ndim)), m.shape[-1])
    return hadamard(x, Tensor(np.broadcast_to(m, x.shape)))
