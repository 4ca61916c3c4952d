"""Connectionist temporal classification, best-path decoding and error rates.

The CTC kernel runs the forward-backward recursion over the blank-interleaved
label entirely in log space (float64) and returns the analytic gradient with
respect to the unnormalized logits. ``CTCLoss`` wraps it as a torch autograd
function so the reading losses and the recognizer training share one kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

BLANK = 0
BLANK_SYMBOL = "<blank>"


class Alphabet:
    """Ordered symbol table with the CTC blank fixed at index 0."""

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if not symbols or symbols[0] != BLANK_SYMBOL:
            symbols = [BLANK_SYMBOL] + [s for s in symbols if s != BLANK_SYMBOL]
        if len(set(symbols)) != len(symbols):
            raise ValueError("alphabet symbols must be unique")
        self.symbols = symbols
        self._index = {s: i for i, s in enumerate(symbols)}

    @classmethod
    def from_texts(cls, texts) -> "Alphabet":
        chars = sorted({c for t in texts for c in t})
        return cls(chars)

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Alphabet) and self.symbols == other.symbols

    def __repr__(self) -> str:
        return f"Alphabet({''.join(self.symbols[1:])!r})"

    def __contains__(self, char: str) -> bool:
        return char in self._index and char != BLANK_SYMBOL

    def missing(self, text: str) -> list[str]:
        return sorted({c for c in text if c not in self})

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as e:
            raise KeyError(f"symbol {e.args[0]!r} not in alphabet") from None

    def decode(self, indices) -> str:
        return "".join(self.symbols[i] for i in indices if i != BLANK)

    def extended(self, texts) -> "Alphabet":
        """Return a copy with new symbols appended; existing indices are kept."""
        new = sorted({c for t in texts for c in t} - set(self.symbols))
        return Alphabet(self.symbols + new)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def min_frames(target: Sequence[int]) -> int:
    """Shortest input length that admits an alignment for ``target``."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _lse3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))
    return np.where(np.isfinite(m), out, -np.inf)


def ctc_loss_batch(logits, targets):
    """Batched CTC negative log-likelihood and its gradient.

    Args:
        logits: array ``(B, T, C)`` of unnormalized scores, blank at index 0.
        targets: ``B`` label sequences of indices in ``[1, C-1]``.

    Returns:
        ``(losses, grads, feasible)`` with ``losses`` of shape ``(B,)``,
        ``grads`` of shape ``(B, T, C)`` and a boolean ``feasible`` mask.
        Infeasible alignments yield ``inf`` loss and an all-zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3:
        raise ValueError(f"expected (B, T, C) logits, got shape {logits.shape}")
    B, T, C = logits.shape
    if len(targets) != B:
        raise ValueError("one target per batch item required")
    targets = [list(map(int, t)) for t in targets]
    for t in targets:
        if not t:
            raise ValueError("empty target sequence")
        if min(t) < 1 or max(t) >= C:
            raise ValueError(f"target indices must lie in [1, {C - 1}]")

    lp = log_softmax(logits)
    S = 2 * max(len(t) for t in targets) + 1
    ext = np.zeros((B, S), dtype=np.int64)
    lengths = np.empty(B, dtype=np.int64)
    for b, t in enumerate(targets):
        ext[b, 1 : 2 * len(t) : 2] = t
        lengths[b] = 2 * len(t) + 1
    valid = np.arange(S)[None, :] < lengths[:, None]

    # skip[b, s]: transition s-2 -> s allowed
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    skip &= valid

    bidx = np.arange(B)[:, None]
    emit = lp[bidx, :, ext].transpose(0, 2, 1)  # (B, T, S)
    emit = np.where(valid[:, None, :], emit, -np.inf)

    neg = np.full((B, S), -np.inf)
    alpha = np.full((B, T, S), -np.inf)
    alpha[:, 0, 0] = emit[:, 0, 0]
    alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        shift1 = np.concatenate([neg[:, :1], prev[:, :-1]], axis=1)
        shift2 = np.concatenate([neg[:, :2], prev[:, :-2]], axis=1)
        shift2 = np.where(skip, shift2, -np.inf)
        alpha[:, t] = _lse3(prev, shift1, shift2) + emit[:, t]

    # beta excludes the emission at its own frame
    beta = np.full((B, T, S), -np.inf)
    last = lengths - 1
    beta[np.arange(B), T - 1, last] = 0.0
    beta[np.arange(B), T - 1, last - 1] = 0.0
    skip_next = np.zeros((B, S), dtype=bool)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1] + emit[:, t + 1]
        shift1 = np.concatenate([nxt[:, 1:], neg[:, :1]], axis=1)
        shift2 = np.concatenate([nxt[:, 2:], neg[:, :2]], axis=1)
        shift2 = np.where(skip_next, shift2, -np.inf)
        beta[:, t] = _lse3(nxt, shift1, shift2)

    end = alpha[np.arange(B), T - 1]
    log_p = np.logaddexp(end[np.arange(B), last], end[np.arange(B), last - 1])
    feasible = np.isfinite(log_p)
    for b, t in enumerate(targets):
        if T < min_frames(t):
            feasible[b] = False

    losses = np.where(feasible, np.maximum(-log_p, 0.0), np.inf)
    grads = np.zeros_like(lp)
    if feasible.any():
        fb = np.flatnonzero(feasible)
        with np.errstate(invalid="ignore"):
            occ = np.exp(alpha[fb] + beta[fb] - log_p[fb, None, None])
        occ = np.nan_to_num(occ, nan=0.0)
        onehot = np.zeros((len(fb), S, C))
        onehot[np.arange(len(fb))[:, None], np.arange(S)[None, :], ext[fb]] = valid[fb]
        gamma = occ @ onehot  # (b, T, C)
        grads[fb] = np.exp(lp[fb]) - gamma
    return losses, grads, feasible


def ctc_loss(logits, target):
    """CTC loss for a single ``(T, C)`` logit matrix.

    Returns ``(loss, grad, feasible)``; see :func:`ctc_loss_batch`.
    """
    logits = np.asarray(logits, dtype=np.float64)
    losses, grads, feasible = ctc_loss_batch(logits[None], [target])
    return float(losses[0]), grads[0], bool(feasible[0])


class CTCLoss(torch.autograd.Function):
    """Autograd bridge: per-item CTC losses for ``(B, T, C)`` logits.

    Infeasible items come back as ``inf`` with zero gradient; callers mask them.
    """

    @staticmethod
    def forward(ctx, logits, targets):
        losses, grads, _ = ctc_loss_batch(logits.detach().cpu().double().numpy(), targets)
        ctx.save_for_backward(torch.from_numpy(grads).to(logits.dtype))
        return torch.from_numpy(losses).to(logits.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (grads,) = ctx.saved_tensors
        g = grad_out.clone()
        g[~torch.isfinite(g)] = 0.0
        return g[:, None, None] * grads, None


def ctc_loss_torch(logits: torch.Tensor, targets) -> torch.Tensor:
    return CTCLoss.apply(logits, [list(t) for t in targets])


def best_path(logits) -> list[int]:
    """Per-frame argmax, consecutive repeats collapsed, blanks removed."""
    path = np.asarray(logits).argmax(axis=-1)
    out = []
    prev = None
    for k in path.tolist():
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def greedy_decode(logits, alphabet: Alphabet) -> str:
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    return alphabet.decode(best_path(logits))


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit costs over any two sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class MetricPair:
    cer: float
    wer: float
    edits_char: int
    edits_word: int
    ref_chars: int
    ref_words: int


def _words(s: str) -> list[str]:
    return s.split(" ") if s else []


def cer_wer(refs: Sequence[str], hyps: Sequence[str]) -> MetricPair:
    """Corpus-level (micro-averaged) character and word error rates."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise ValueError("empty reference corpus")
    ec = ew = nc = nw = 0
    for r, h in zip(refs, hyps):
        ec += edit_distance(r, h)
        nc += len(r)
        rw = _words(r)
        ew += edit_distance(rw, _words(h))
        nw += len(rw)
    if nc == 0:
        raise ValueError("reference corpus contains no characters")
    return MetricPair(
        cer=ec / nc, wer=ew / nw if nw else 0.0,
        edits_char=ec, edits_word=ew, ref_chars=nc, ref_words=nw,
    )
