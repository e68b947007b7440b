"""Transformer encoder-decoder that labels a sequence cluster by cluster.

The encoder reads the whole embedding sequence (no positional encoding
by default, so it is permutation-equivariant); the decoder emits one
label per input position, conditioned on all previous labels through
causal self-attention and on the encoder states through source
attention restricted to a tri-diagonal band around the position being
labelled (the input/output alignment is one-to-one and monotonic, so a
narrow band suffices).  Decoding constrains each step to the labels
seen so far plus one new label, which makes every output sequence
canonical by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from nclust.core import CanonicalLabelSequence, is_canonical


class MaskError(RuntimeError):
    """An attention row had no attendable key (mask construction bug)."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``max_labels`` is the largest cluster count the model can emit; the
    label vocabulary is ``{0, .., max_labels}`` where 0 is the decoder
    start token and never appears as an output.
    """

    input_dim: int
    dim_model: int = 256
    heads: int = 4
    encoder_blocks: int = 4
    decoder_blocks: int = 4
    ff_dim: int | None = None
    max_labels: int = 4
    dropout: float = 0.1
    positional_encoding: bool = False
    source_band: int = 1
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.dim_model < 1 or self.heads < 1:
            raise ValueError("dimensions and head count must be positive")
        if self.dim_model % self.heads != 0:
            raise ValueError("dim_model must be divisible by heads")
        if self.encoder_blocks < 1 or self.decoder_blocks < 1:
            raise ValueError("need at least one encoder and one decoder block")
        if self.max_labels < 1:
            raise ValueError("max_labels must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def head_dim(self) -> int:
        return self.dim_model // self.heads

    @property
    def feed_forward_dim(self) -> int:
        return self.ff_dim if self.ff_dim is not None else 4 * self.dim_model

    @property
    def label_vocab(self) -> int:
        return self.max_labels + 1

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def causal_mask(n: int, device=None) -> torch.Tensor:
    """n x n boolean mask, True where position i may attend j (j <= i)."""
    return torch.tril(torch.ones(n, n, dtype=torch.bool, device=device))


def banded_mask(rows: int, cols: int, band: int = 1, device=None) -> torch.Tensor:
    """rows x cols boolean mask, True where |i - j| <= band."""
    i = torch.arange(rows, device=device).unsqueeze(1)
    j = torch.arange(cols, device=device).unsqueeze(0)
    return (i - j).abs() <= band


def attention(
    queries: torch.Tensor,
    keys_values: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    mask: torch.Tensor | None = None,
    dropout: nn.Dropout | None = None,
    probs_sink: list | None = None,
) -> torch.Tensor:
    """Scaled dot-product attention for one head.

    ``queries`` (.., L, D_m) and ``keys_values`` (.., L', D_m) are
    projected by ``w_q``/``w_k``/``w_v`` (D_m x D_h); scores are scaled
    by sqrt(D_h); ``mask`` (L x L', True = allowed) adds a -inf bias so
    banned positions get exactly zero weight.

    Raises:
        MaskError: if any query row has every key banned.
    """
    head_dim = w_q.shape[1]
    scores = (queries @ w_q) @ (keys_values @ w_k).transpose(-2, -1)
    scores = scores / math.sqrt(head_dim)
    if mask is not None:
        if not bool(mask.any(dim=-1).all()):
            raise MaskError("attention row with no attendable key")
        scores = scores.masked_fill(~mask, float("-inf"))
    probs = torch.softmax(scores, dim=-1)
    if probs_sink is not None:
        probs_sink.append(probs)
    if dropout is not None:
        probs = dropout(probs)
    return probs @ (keys_values @ w_v)


def multi_head_attention(
    inputs: torch.Tensor,
    context: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_o: torch.Tensor,
    mask: torch.Tensor | None = None,
    dropout: nn.Dropout | None = None,
    probs_sink: list | None = None,
) -> torch.Tensor:
    """Concatenate per-head attention outputs and project by ``w_o``.

    ``w_q``/``w_k``/``w_v`` are stacked per head (H x D_m x D_h); with
    ``context = inputs`` this is self-attention, otherwise source
    attention over encoder states.
    """
    heads = [
        attention(
            inputs, context, w_q[h], w_k[h], w_v[h],
            mask=mask, dropout=dropout, probs_sink=probs_sink,
        )
        for h in range(w_q.shape[0])
    ]
    return torch.cat(heads, dim=-1) @ w_o


class MultiHeadAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        shape = (config.heads, config.dim_model, config.head_dim)
        self.w_q = nn.Parameter(torch.empty(shape))
        self.w_k = nn.Parameter(torch.empty(shape))
        self.w_v = nn.Parameter(torch.empty(shape))
        self.w_o = nn.Parameter(torch.empty(config.dim_model, config.dim_model))
        self.attn_dropout = nn.Dropout(config.dropout)
        for weight in (self.w_q, self.w_k, self.w_v):
            for h in range(shape[0]):
                nn.init.xavier_uniform_(weight.data[h])
        nn.init.xavier_uniform_(self.w_o.data)

    def forward(self, inputs, context, mask=None, probs_sink=None):
        return multi_head_attention(
            inputs, context, self.w_q, self.w_k, self.w_v, self.w_o,
            mask=mask, dropout=self.attn_dropout, probs_sink=probs_sink,
        )


class FeedForward(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.inner = nn.Linear(config.dim_model, config.feed_forward_dim)
        self.outer = nn.Linear(config.feed_forward_dim, config.dim_model)

    def forward(self, x):
        return self.outer(F.relu(self.inner(x)))


class EncoderBlock(nn.Module):
    """Self-attention then feed-forward, residual + layer norm after each."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(config)
        self.feed_forward = FeedForward(config)
        self.norm1 = nn.LayerNorm(config.dim_model)
        self.norm2 = nn.LayerNorm(config.dim_model)
        self.dropout1 = nn.Dropout(config.dropout)
        self.dropout2 = nn.Dropout(config.dropout)

    def forward(self, x, probs_sink=None):
        x = self.norm1(x + self.dropout1(self.self_attn(x, x, probs_sink=probs_sink)))
        x = self.norm2(x + self.dropout2(self.feed_forward(x)))
        return x


class DecoderBlock(nn.Module):
    """Causal self-attention, banded source attention, feed-forward."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(config)
        self.source_attn = MultiHeadAttention(config)
        self.feed_forward = FeedForward(config)
        self.norm1 = nn.LayerNorm(config.dim_model)
        self.norm2 = nn.LayerNorm(config.dim_model)
        self.norm3 = nn.LayerNorm(config.dim_model)
        self.dropout1 = nn.Dropout(config.dropout)
        self.dropout2 = nn.Dropout(config.dropout)
        self.dropout3 = nn.Dropout(config.dropout)

    def forward(self, x, memory, self_mask, source_mask, probs_sink=None):
        x = self.norm1(
            x + self.dropout1(self.self_attn(x, x, self_mask, probs_sink=probs_sink))
        )
        x = self.norm2(
            x
            + self.dropout2(
                self.source_attn(x, memory, source_mask, probs_sink=probs_sink)
            )
        )
        x = self.norm3(x + self.dropout3(self.feed_forward(x)))
        return x


def sinusoidal_encoding(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    position = torch.arange(length, dtype=dtype).unsqueeze(1)
    freqs = torch.exp(
        torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim)
    )
    enc = torch.zeros(length, dim, dtype=dtype)
    enc[:, 0::2] = torch.sin(position * freqs)
    enc[:, 1::2] = torch.cos(position * freqs[: (dim + 1) // 2])
    return enc


class ClusteringTransformer(nn.Module):
    """Sequence-to-sequence cluster labeller.

    ``encode`` maps an N x input_dim sequence to N hidden states;
    ``decode`` maps a label history (starting with token 0) plus the
    hidden states to per-position logits over labels 1..max_labels.
    Inputs are expected already variance-scaled (unit embeddings times
    sqrt(dim)).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.input_proj = nn.Linear(config.input_dim, config.dim_model)
        self.label_embedding = nn.Embedding(config.label_vocab, config.dim_model)
        self.encoder = nn.ModuleList(
            EncoderBlock(config) for _ in range(config.encoder_blocks)
        )
        self.decoder = nn.ModuleList(
            DecoderBlock(config) for _ in range(config.decoder_blocks)
        )
        self.output_proj = nn.Linear(config.dim_model, config.max_labels)
        self.input_dropout = nn.Dropout(config.dropout)
        self.to(config.torch_dtype)

    def _positional(self, x: torch.Tensor) -> torch.Tensor:
        if not self.config.positional_encoding:
            return x
        enc = sinusoidal_encoding(x.shape[-2], x.shape[-1], dtype=x.dtype)
        return x + enc.to(x.device)

    def encode(self, x: torch.Tensor, probs_sink: list | None = None) -> torch.Tensor:
        """Hidden states for an (.., N, input_dim) scaled embedding sequence."""
        if x.shape[-2] < 1:
            raise ValueError("cannot encode an empty sequence")
        h = self.input_dropout(self._positional(self.input_proj(x)))
        for block in self.encoder:
            h = block(h, probs_sink=probs_sink)
        return h

    def decode(
        self,
        history: torch.Tensor,
        memory: torch.Tensor,
        probs_sink: list | None = None,
    ) -> torch.Tensor:
        """Logits for each position given the label history.

        ``history`` (.., L) holds tokens 0..max_labels with history[0]
        being the start token 0; row t of the output scores the label of
        input position t.  L may not exceed the encoder length.
        """
        length = history.shape[-1]
        n = memory.shape[-2]
        if length > n:
            raise ValueError(f"label history length {length} exceeds input length {n}")
        if int(history.max()) >= self.config.label_vocab or int(history.min()) < 0:
            raise ValueError("label token out of vocabulary")
        device = history.device
        self_mask = causal_mask(length, device=device)
        source_mask = banded_mask(length, n, self.config.source_band, device=device)
        h = self.input_dropout(self._positional(self.label_embedding(history)))
        for block in self.decoder:
            h = block(h, memory, self_mask, source_mask, probs_sink=probs_sink)
        return self.output_proj(h)

    def forward(self, x: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits (.., N, max_labels) for target labels 1..K."""
        history = shift_right(targets)
        return self.decode(history, self.encode(x))

    def nll_loss(self, x: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        """Mean per-token negative log-likelihood of the target labels."""
        _validate_targets(targets, self.config.max_labels)
        logits = self.forward(x, targets)
        return nll_from_logits(logits, targets)


def shift_right(targets: torch.Tensor) -> torch.Tensor:
    """Prepend the start token and drop the last label."""
    start = torch.zeros_like(targets[..., :1])
    return torch.cat([start, targets[..., :-1]], dim=-1)


def _validate_targets(targets: torch.Tensor, max_labels: int) -> None:
    if int(targets.min()) < 1 or int(targets.max()) > max_labels:
        raise ValueError(f"target labels must lie in 1..{max_labels}")


def nll_from_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of labels 1..K against (.., K) logits, averaged per token."""
    log_probs = F.log_softmax(logits, dim=-1)
    picked = log_probs.gather(-1, (targets - 1).unsqueeze(-1)).squeeze(-1)
    return -picked.mean()


def gradients(
    model: ClusteringTransformer, x: torch.Tensor, targets: torch.Tensor
) -> dict[str, torch.Tensor]:
    """Gradients of the mean NLL with respect to every named parameter.

    Parameters that do not influence the loss (e.g. unused label
    embedding rows) get explicit zeros.
    """
    model.zero_grad(set_to_none=True)
    loss = model.nll_loss(x, targets)
    loss.backward()
    grads = {}
    for name, param in model.named_parameters():
        grads[name] = (
            torch.zeros_like(param) if param.grad is None else param.grad.detach().clone()
        )
    model.zero_grad(set_to_none=True)
    return grads


def _feasible(history_max: int, max_labels: int) -> int:
    """Largest label allowed next under first-appearance ordering."""
    return min(history_max + 1, max_labels)


def _masked_log_probs(logits: torch.Tensor, allowed_max: int) -> torch.Tensor:
    masked = logits.clone()
    masked[allowed_max:] = float("-inf")
    return F.log_softmax(masked, dim=-1)


@torch.no_grad()
def decode_greedy(
    model: ClusteringTransformer, x: torch.Tensor
) -> CanonicalLabelSequence:
    """Greedy decoding under the first-appearance feasibility constraint.

    At each step only labels ``1..min(max_so_far + 1, max_labels)`` are
    considered, so the output is canonical by construction.
    """
    was_training = model.training
    model.eval()
    try:
        memory = model.encode(x)
        n = memory.shape[-2]
        labels: list[int] = []
        for t in range(n):
            history = torch.tensor([0] + labels, dtype=torch.long)
            logits = model.decode(history, memory)[-1]
            allowed = _feasible(max(labels, default=0), model.config.max_labels)
            step = _masked_log_probs(logits, allowed)
            labels.append(int(step.argmax()) + 1)
        return tuple(labels)
    finally:
        model.train(was_training)


@torch.no_grad()
def decode_beam(
    model: ClusteringTransformer, x: torch.Tensor, width: int
) -> CanonicalLabelSequence:
    """Beam search over canonical label sequences.

    Keeps the ``width`` best prefixes by total log-probability (ties
    broken lexicographically, so width 1 reproduces greedy decoding) and
    returns the best completed hypothesis.
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")
    was_training = model.training
    model.eval()
    try:
        memory = model.encode(x)
        n = memory.shape[-2]
        beams: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
        for t in range(n):
            candidates: list[tuple[float, tuple[int, ...]]] = []
            histories = torch.tensor(
                [[0, *labels] for _, labels in beams], dtype=torch.long
            )
            batch_memory = memory.unsqueeze(0).expand(len(beams), -1, -1)
            logits = model.decode(histories, batch_memory)[:, -1, :]
            for (score, labels), row in zip(beams, logits):
                allowed = _feasible(max(labels, default=0), model.config.max_labels)
                log_probs = _masked_log_probs(row, allowed)
                for lab in range(1, allowed + 1):
                    candidates.append(
                        (score + float(log_probs[lab - 1]), labels + (lab,))
                    )
            candidates.sort(key=lambda c: (-c[0], c[1]))
            beams = candidates[:width]
        best_score, best_labels = beams[0]
        assert is_canonical(best_labels)
        return best_labels
    finally:
        model.train(was_training)


def sequence_log_prob(
    model: ClusteringTransformer, x: torch.Tensor, labels: CanonicalLabelSequence
) -> float:
    """Total log-probability of a canonical label sequence.

    Uses the same feasibility-constrained distribution as the decoders
    (infeasible labels masked out before the softmax), computed in one
    teacher-forced pass rather than incrementally.
    """
    if not is_canonical(labels):
        raise ValueError("sequence_log_prob expects a canonical label sequence")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            targets = torch.tensor(labels, dtype=torch.long)
            logits = model.forward(x, targets)
            total = 0.0
            seen = 0
            for t, lab in enumerate(labels):
                allowed = _feasible(seen, model.config.max_labels)
                total += float(_masked_log_probs(logits[t], allowed)[lab - 1])
                seen = max(seen, lab)
            return total
    finally:
        model.train(was_training)
