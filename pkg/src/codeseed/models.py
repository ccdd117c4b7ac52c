"""Base language models and the frozen-branch attention transfer model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import neural as nn
from .corpus import ContextWindow, TokenSequence, window_arrays
from .vocab import PAD_ID, UNK_ID, Vocabulary

UNITS = ("rnn", "gru")
GRU_NAMES = nn.GruParams._fields


@dataclass
class BaseLMConfig:
    unit: str
    vocab_size: int
    embed_dim: int = 300
    hidden_dim: int = 300
    context: int = 20
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}, got {self.unit!r}")
        for name in ("vocab_size", "embed_dim", "hidden_dim", "context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


class Encoder:
    """Embedding followed by a recurrent layer; yields the full hidden sequence."""

    def __init__(self, unit: str, vocab_size: int, embed_dim: int, hidden_dim: int,
                 rng: np.random.Generator, prefix: str = ""):
        if unit not in UNITS:
            raise ValueError(f"unknown recurrent unit {unit!r}")
        self.unit = unit
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.embedding = nn.Parameter(prefix + "embedding", nn.glorot(rng, (vocab_size, embed_dim)))
        if unit == "rnn":
            names = {"W": (embed_dim, hidden_dim), "U": (hidden_dim, hidden_dim)}
        else:
            names = {n: (embed_dim if n.startswith("W") else hidden_dim, hidden_dim) for n in GRU_NAMES}
        self.weights = {
            n: nn.Parameter(f"{prefix}{unit}.{n}", nn.glorot(rng, shape)) for n, shape in names.items()
        }

    def parameters(self) -> list[nn.Parameter]:
        return [self.embedding, *self.weights.values()]

    @property
    def vocab_size(self) -> int:
        return self.embedding.value.shape[0]

    def _gru(self) -> nn.GruParams:
        return nn.GruParams(*(self.weights[n].value for n in GRU_NAMES))

    def forward(self, ids: np.ndarray):
        """``ids`` is ``(B, T)``; returns ``H`` of shape ``(B, T, hidden)`` and a cache."""
        X = nn.embed_lookup(self.embedding.value, ids)
        B, T = ids.shape
        H = np.empty((B, T, self.hidden_dim), dtype=X.dtype)
        h = np.zeros((B, self.hidden_dim), dtype=X.dtype)
        steps = []
        if self.unit == "rnn":
            W, U = self.weights["W"].value, self.weights["U"].value
            for t in range(T):
                h_prev = h
                h = nn.rnn_cell(X[:, t], h_prev, W, U)
                steps.append(h_prev)
                H[:, t] = h
        else:
            p = self._gru()
            for t in range(T):
                h, cache = nn.gru_cell_forward(X[:, t], h, p)
                steps.append(cache)
                H[:, t] = h
        return H, (ids, X, H, steps)

    def backward(self, dH: np.ndarray, cache) -> None:
        """Backpropagate through time, accumulating into trainable parameters."""
        ids, X, H, steps = cache
        B, T, _ = dH.shape
        dX = np.zeros_like(X)
        dh = np.zeros((B, self.hidden_dim), dtype=dH.dtype)
        if self.unit == "rnn":
            Wp, Up = self.weights["W"], self.weights["U"]
            for t in reversed(range(T)):
                dh = dh + dH[:, t]
                dx, dh, dW, dU = nn.rnn_cell_backward(dh, X[:, t], steps[t], H[:, t], Wp.value, Up.value)
                dX[:, t] = dx
                Wp.accumulate(dW)
                Up.accumulate(dU)
        else:
            p = self._gru()
            for t in reversed(range(T)):
                dh = dh + dH[:, t]
                dx, dh, grads = nn.gru_cell_backward(dh, steps[t], p)
                dX[:, t] = dx
                for n, g in zip(GRU_NAMES, grads):
                    self.weights[n].accumulate(g)
        nn.embed_backward(self.embedding, ids, dX)

    def encode_final(self, ids: np.ndarray) -> np.ndarray:
        return self.forward(ids)[0][:, -1]


class BaseLM:
    """Embedding, RNN/GRU, dropout on the final state, dense softmax over the vocabulary."""

    kind = "base"

    def __init__(self, config: BaseLMConfig, vocab: Vocabulary | None = None, seed: int = 0):
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ValueError("vocabulary size does not match config")
        self.config = config
        self.vocab = vocab
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config.unit, config.vocab_size, config.embed_dim, config.hidden_dim, rng)
        self.out_W = nn.Parameter("out_W", nn.glorot(rng, (config.hidden_dim, config.vocab_size)))
        self.out_b = nn.Parameter("out_b", np.zeros(config.vocab_size))

    @property
    def context(self) -> int:
        return self.config.context

    @property
    def output_vocab(self) -> Vocabulary:
        return self.vocab

    def parameters(self) -> list[nn.Parameter]:
        return [*self.encoder.parameters(), self.out_W, self.out_b]

    def named_parameters(self) -> dict[str, nn.Parameter]:
        return {p.name: p for p in self.parameters()}

    def astype(self, dtype) -> "BaseLM":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    def _forward(self, X, training, rng):
        H, enc_cache = self.encoder.forward(X)
        h = H[:, -1]
        mask = None
        if training and self.config.dropout_rate > 0:
            mask = nn.dropout_mask(h.shape, self.config.dropout_rate, rng, h.dtype)
            h = h * mask
        probs = nn.dense_softmax(h, self.out_W.value, self.out_b.value)
        return probs, (enc_cache, H, h, mask)

    def forward(self, X, training: bool = False, rng: np.random.Generator | None = None):
        """Next-token distribution for each context row of ``X`` (``(B, tau)`` ids)."""
        return self._forward(np.atleast_2d(X), training, rng)[0]

    def loss_and_grad(self, X, y, training: bool = True, rng=None) -> float:
        probs, (enc_cache, H, h, mask) = self._forward(X, training, rng)
        loss = nn.cross_entropy(probs, y)
        dlogits = nn.softmax_ce_backward(probs, y)
        self.out_W.accumulate(h.T @ dlogits)
        self.out_b.accumulate(dlogits.sum(axis=0))
        dh = dlogits @ self.out_W.value.T
        if mask is not None:
            dh = dh * mask
        dH = np.zeros_like(H)
        dH[:, -1] = dh
        self.encoder.backward(dH, enc_cache)
        return loss

    def loss(self, X, y) -> float:
        return nn.cross_entropy(self.forward(X), y)

    def windows(self, seqs: Sequence[TokenSequence]):
        """Encode streams and slice them into ``(X, y)`` arrays, file by file."""
        parts = [window_arrays(self.vocab.encode(s.tokens), self.context, PAD_ID) for s in seqs]
        return _stack(parts, self.context)

    def context_input(self, tokens: Sequence[str]) -> np.ndarray:
        return _left_pad(self.vocab.encode(tokens[-self.context:]), self.context)

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())


class TransferModel:
    """Two frozen pre-trained encoders, concatenated per timestep, pooled by attention.

    Inputs are ``(B, 2, tau)``: the same context encoded with the RNN
    branch's vocabulary (row 0) and the GRU branch's vocabulary (row 1).
    """

    kind = "transfer"
    branch_names = ("rnn", "gru")

    def __init__(self, rnn_encoder: Encoder, gru_encoder: Encoder,
                 branch_vocabs: tuple[Vocabulary, Vocabulary], target_vocab: Vocabulary,
                 context: int, dropout_rate: float = 0.5, attn_dim: int | None = None, seed: int = 0):
        self.branches = [rnn_encoder, gru_encoder]
        self.branch_vocabs = tuple(branch_vocabs)
        self.vocab = target_vocab
        self.config_context = context
        self.dropout_rate = dropout_rate
        self.seed = seed
        width = rnn_encoder.hidden_dim + gru_encoder.hidden_dim
        self.attn_dim = attn_dim or width
        rng = np.random.default_rng(seed)
        self.W_a = nn.Parameter("attention.W_a", nn.glorot(rng, (width, self.attn_dim)))
        self.v_a = nn.Parameter("attention.v_a", rng.uniform(
            -np.sqrt(6.0 / (self.attn_dim + 1)), np.sqrt(6.0 / (self.attn_dim + 1)), self.attn_dim))
        self.out_W = nn.Parameter("out_W", nn.glorot(rng, (width, len(target_vocab))))
        self.out_b = nn.Parameter("out_b", np.zeros(len(target_vocab)))

    @property
    def context(self) -> int:
        return self.config_context

    @property
    def output_vocab(self) -> Vocabulary:
        return self.vocab

    @property
    def width(self) -> int:
        return sum(b.hidden_dim for b in self.branches)

    def branch_parameters(self) -> list[nn.Parameter]:
        return [p for b in self.branches for p in b.parameters()]

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [self.W_a, self.v_a, self.out_W, self.out_b]

    def parameters(self) -> list[nn.Parameter]:
        return [*self.branch_parameters(), *self.trainable_parameters()]

    def named_parameters(self) -> dict[str, nn.Parameter]:
        return {p.name: p for p in self.parameters()}

    def astype(self, dtype) -> "TransferModel":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    def _attn(self) -> nn.AttentionParams:
        return nn.AttentionParams(self.W_a.value, self.v_a.value)

    def _forward(self, X, training, rng):
        outs = [b.forward(X[:, i]) for i, b in enumerate(self.branches)]
        H = np.concatenate([o[0] for o in outs], axis=-1)
        mask = None
        if training and self.dropout_rate > 0:
            mask = nn.dropout_mask(H.shape, self.dropout_rate, rng, H.dtype)
            H = H * mask
        ctx, weights, attn_cache = nn.attention_pool(H, self._attn())
        probs = nn.dense_softmax(ctx, self.out_W.value, self.out_b.value)
        return probs, (outs, mask, ctx, weights, attn_cache)

    def forward(self, X, training: bool = False, rng: np.random.Generator | None = None):
        X = np.asarray(X)
        if X.ndim == 2:
            X = X[None]
        return self._forward(X, training, rng)[0]

    def attention_weights(self, X) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim == 2:
            X = X[None]
        return self._forward(X, False, None)[1][3]

    def loss_and_grad(self, X, y, training: bool = True, rng=None) -> float:
        probs, (outs, mask, ctx, _, attn_cache) = self._forward(X, training, rng)
        loss = nn.cross_entropy(probs, y)
        dlogits = nn.softmax_ce_backward(probs, y)
        self.out_W.accumulate(ctx.T @ dlogits)
        self.out_b.accumulate(dlogits.sum(axis=0))
        dctx = dlogits @ self.out_W.value.T
        dH, dW_a, dv_a = nn.attention_backward(dctx, attn_cache, self._attn())
        self.W_a.accumulate(dW_a)
        self.v_a.accumulate(dv_a)
        if mask is not None:
            dH = dH * mask
        # Branches are only walked when someone has unfrozen them.
        off = 0
        for b, (H_b, cache) in zip(self.branches, outs):
            if any(p.trainable for p in b.parameters()):
                b.backward(dH[..., off:off + b.hidden_dim], cache)
            off += b.hidden_dim
        return loss

    def loss(self, X, y) -> float:
        return nn.cross_entropy(self.forward(X), y)

    def windows(self, seqs: Sequence[TokenSequence]):
        tau = self.context
        parts = []
        for s in seqs:
            Xs, y = [], None
            for v in self.branch_vocabs:
                Xb, yb = window_arrays(v.encode(s.tokens), tau, PAD_ID)
                Xs.append(Xb)
            _, y = window_arrays(self.vocab.encode(s.tokens), tau, PAD_ID)
            parts.append((np.stack(Xs, axis=1), y))
        if not parts:
            return np.zeros((0, 2, tau), dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def context_input(self, tokens: Sequence[str]) -> np.ndarray:
        tail = list(tokens[-self.context:])
        return np.stack([_left_pad(v.encode(tail), self.context) for v in self.branch_vocabs])

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())


def _left_pad(ids: Sequence[int], tau: int) -> np.ndarray:
    out = np.full(tau, PAD_ID, dtype=np.int64)
    if len(ids):
        out[tau - len(ids):] = ids
    return out


def _stack(parts, tau):
    if not parts:
        return np.zeros((0, tau), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def base_forward(m: BaseLM, window: ContextWindow | Sequence[int], training: bool = False, rng=None) -> np.ndarray:
    ctx = window.context if isinstance(window, ContextWindow) else window
    ctx = np.asarray(ctx, dtype=np.int64)
    if ctx.shape != (m.context,):
        raise ValueError(f"context must have length {m.context}")
    return m.forward(ctx[None], training, rng)[0]


def transfer_forward(tm: TransferModel, context: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
    context = np.asarray(context, dtype=np.int64)
    if context.shape != (2, tm.context):
        raise ValueError(f"transfer context must have shape (2, {tm.context})")
    return tm.forward(context[None], training, rng)[0]


def build_transfer(rnn: BaseLM, gru: BaseLM, target_vocab: Vocabulary, dropout_rate: float = 0.5,
                   attn_dim: int | None = None, seed: int = 0) -> TransferModel:
    """Copy both pre-trained encoders, freeze them, and attach a fresh attention head."""
    if rnn.config.unit != "rnn" or gru.config.unit != "gru":
        raise ValueError("build_transfer needs an rnn model and a gru model, in that order")
    if rnn.context != gru.context:
        raise ValueError(f"context mismatch: rnn {rnn.context} vs gru {gru.context}")
    if rnn.config.embed_dim != gru.config.embed_dim:
        raise ValueError("embedding width mismatch between branches")
    if rnn.vocab is None or gru.vocab is None:
        raise ValueError("pre-trained models must carry their vocabularies")
    encoders = []
    for name, base in (("rnn", rnn), ("gru", gru)):
        src = base.encoder
        enc = Encoder.__new__(Encoder)
        enc.unit, enc.hidden_dim, enc.embed_dim = src.unit, src.hidden_dim, src.embed_dim
        prefix = f"{name}_branch."
        enc.embedding = nn.Parameter(prefix + "embedding", src.embedding.value.copy(), trainable=False)
        enc.weights = {
            n: nn.Parameter(prefix + p.name, p.value.copy(), trainable=False) for n, p in src.weights.items()
        }
        encoders.append(enc)
    return TransferModel(encoders[0], encoders[1], (rnn.vocab, gru.vocab), target_vocab,
                         rnn.context, dropout_rate, attn_dim, seed)


def rank_ids(probs: np.ndarray, k: int, exclude: Sequence[int] = (PAD_ID, UNK_ID)) -> np.ndarray:
    """Top-``k`` ids by probability, ties broken by ascending id, reserved ids excluded."""
    if k < 1:
        raise ValueError("k must be >= 1")
    p = np.array(probs, dtype=np.float64, copy=True)
    p[list(exclude)] = -np.inf
    eligible = p.size - len(exclude)
    k = min(k, eligible)
    if k < p.size // 4:
        thr = np.partition(p, p.size - k)[p.size - k]
        cand = np.flatnonzero(p >= thr)
    else:
        cand = np.arange(p.size)
    order = cand[np.argsort(-p[cand], kind="stable")]
    return order[:k]


def rank_batch(P: np.ndarray, k: int) -> np.ndarray:
    return np.stack([rank_ids(row, k) for row in P]) if len(P) else np.zeros((0, k), dtype=np.int64)


def predict_topk(model, context, k: int = 10) -> list[tuple[str, float]]:
    """Ranked ``(token, probability)`` suggestions.

    ``context`` may be a token list (encoded with the model's vocabularies)
    or an already-encoded model input.
    """
    if not len(context) or isinstance(context[0], str):
        context = model.context_input(list(context))
    probs = model.forward(np.asarray(context)[None])[0]
    ids = rank_ids(probs, k)
    vocab = model.output_vocab
    return [(vocab.id_to_token[i], float(probs[i])) for i in ids]
