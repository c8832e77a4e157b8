"""Pooling, the shared contrastive head, similarity matrices and the three
matching modes."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .art import ObjectTokens
from .errors import EmptyRegionError
from .numcore import Tensor, add_mlp, l2_normalize, mlp_forward, mul, sum_

MODES = ("greedy", "hungarian", "gt")


@dataclass
class Embedding:
    vector: np.ndarray
    source: tuple = None


@dataclass
class SimilarityMatrix:
    S: np.ndarray
    rows: list
    cols: list


@dataclass
class Assignment:
    pi: np.ndarray  # row -> column, -1 when unmatched
    mode: str
    score: float

    def pairs(self):
        return [(i, int(j)) for i, j in enumerate(self.pi) if j >= 0]


def init_params(ps, d_v, d_c, hidden, rng):
    add_mlp(ps, "g", d_v, hidden, d_c, rng)


def pool_batch(tokens, validity):
    """Masked mean over valid slots: (M, K, D) -> (M, D)."""
    validity = np.asarray(validity, dtype=bool)
    counts = validity.sum(axis=-1)
    if np.any(counts == 0):
        raise EmptyRegionError("cannot pool an object with no valid tokens")
    w = validity / counts[..., None]
    return sum_(mul(tokens, w[..., None]), axis=-2)


def pool_object(tokens):
    """Mean of the valid token rows of one ObjectTokens."""
    t = tokens.tokens if isinstance(tokens.tokens, Tensor) else Tensor(tokens.tokens)
    return pool_batch(t, tokens.validity)


def embed_batch(pooled, params):
    return l2_normalize(mlp_forward(pooled, params.scope("g")))


def embed(pooled, params, source=None):
    z = embed_batch(pooled if isinstance(pooled, Tensor) else Tensor(np.atleast_2d(pooled)), params)
    return Embedding(z.data.reshape(-1), source)


def similarity_matrix(za, zb, rows=None, cols=None):
    za = np.atleast_2d(getattr(za, "data", za))
    zb = np.atleast_2d(getattr(zb, "data", zb))
    if za.shape[0] == 0 or zb.shape[0] == 0:
        S = np.zeros((za.shape[0], zb.shape[0]))
    else:
        S = np.clip(za @ zb.T, -1.0, 1.0)
    return SimilarityMatrix(S, rows or list(range(S.shape[0])), cols or list(range(S.shape[1])))


def match(S, mode="greedy", canonical=None, threshold=-1.0):
    """Cross-view mapping from a similarity matrix.

    ``gt`` pairs canonical indices (``canonical`` as explicit row->col pairs,
    or identity order when omitted). Pairs scoring below ``threshold`` are
    dropped in the greedy and hungarian modes.
    """
    S = np.asarray(getattr(S, "S", S), dtype=np.float64)
    n, m = S.shape
    if mode == "greedy":
        pi = kernels.greedy_max(S) if S.size else np.full(n, -1, dtype=np.int64)
    elif mode == "hungarian":
        if S.size == 0:
            pi = np.full(n, -1, dtype=np.int64)
        elif n <= m:
            pi = kernels.hungarian_min(-S)
        else:
            cols = kernels.hungarian_min(-S.T)
            pi = np.full(n, -1, dtype=np.int64)
            pi[cols] = np.arange(m)
    elif mode == "gt":
        pi = np.full(n, -1, dtype=np.int64)
        if canonical is None:
            k = min(n, m)
            pi[:k] = np.arange(k)
        else:
            for i, j in canonical:
                pi[i] = j
    else:
        raise ValueError(f"unknown matching mode {mode!r}")
    if mode != "gt" and threshold > -1.0:
        for i in range(n):
            if pi[i] >= 0 and S[i, pi[i]] < threshold:
                pi[i] = -1
    score = float(sum(S[i, j] for i, j in enumerate(pi) if j >= 0))
    return Assignment(pi, mode, score)


def placeholder(K, d):
    return ObjectTokens(np.zeros((K, d)), np.zeros(K, dtype=bool), None)


def reorder(tokens_b, pi):
    """Slot i receives the tokens of ``pi[i]``; unmatched slots get an all-invalid placeholder."""
    pi = getattr(pi, "pi", pi)
    out = []
    for j in pi:
        if j < 0:
            ref = tokens_b[0] if tokens_b else None
            K, d = (ref.validity.shape[0], np.shape(getattr(ref.tokens, "data", ref.tokens))[1]) if ref else (0, 0)
            out.append(placeholder(K, d))
        elif j >= len(tokens_b):
            raise IndexError(f"mapping points at target {j} but only {len(tokens_b)} exist")
        else:
            out.append(tokens_b[j])
    return out


def reorder_index(pi, n_b):
    """Gather index into ``concat([tokens_b, placeholder])`` realising :func:`reorder` on stacked tensors."""
    pi = np.asarray(getattr(pi, "pi", pi))
    if np.any(pi >= n_b):
        raise IndexError("mapping points past the target list")
    return np.where(pi < 0, n_b, pi)
