"""Region-grounded input assembly and the small answer scorer."""
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import EmptyRegionError
from .numcore import (Tensor, add_linear, add_mlp, as_tensor, concat, glorot, linear, masked_softmax,
                      log_softmax, matmul, mean, mlp_forward, mul, reshape, sum_, take)

REGION = "<region>"
UNK = "<unk>"
_TOKEN_RE = re.compile(r"<region>|[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text):
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, words):
        words = sorted(set(words) - {UNK, REGION})
        self.words = [UNK, REGION] + words
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def ids(self, tokens):
        return [self.index.get(t, 0) for t in tokens]


@dataclass
class ReasoningInput:
    sequence: object  # Tensor (L, D_r)
    slot_map: list  # (position, region_ref index)
    tokens: list


@dataclass
class AnswerDistribution:
    log_scores: object  # Tensor (n_options,)
    probs: np.ndarray
    predicted: int


def init_params(ps, d_v, d_r, vocab_size, hidden, rng):
    add_mlp(ps, "rsn.adapter", d_v, hidden, d_r, rng)
    ps.add("rsn.null", rng.normal(scale=0.02, size=d_r))
    add_linear(ps, "rsn.cue_g", d_v, d_r, rng)
    add_linear(ps, "rsn.cue_o", d_v, d_r, rng)
    ps.add("rsn.embed", glorot(rng, vocab_size, d_r))
    for k in ("wq", "wk", "wv"):
        ps.add(f"rsn.attn.{k}", glorot(rng, d_r, d_r))
    ps.add("rsn.bilinear", glorot(rng, d_r, d_r))


def adapt_regions(tokens, validity, params):
    """Per-token adapter into the reasoning width; invalid slots become the null embedding."""
    validity = np.asarray(validity, dtype=bool)
    if not validity.any():
        raise EmptyRegionError("region has no valid tokens")
    tokens = as_tensor(tokens)
    out = mlp_forward(tokens, params.scope("rsn.adapter"))
    keep = validity[..., None].astype(np.float64)
    return mul(out, keep) + mul(params["rsn.null"], 1.0 - keep)


def _masked_mean(tokens, validity):
    validity = np.asarray(validity, dtype=bool)
    n = validity.sum()
    if n == 0:
        raise EmptyRegionError("no valid aligned tokens to pool")
    w = validity.astype(np.float64) / n
    flat = reshape(tokens, (-1, tokens.shape[-1]))
    return matmul(Tensor(w.reshape(1, -1)), flat)


def scene_and_target_cues(aligned, aligned_valid, target_tokens, target_valid, params):
    """Global cue from every valid aligned token in view; target cue from one object.

    ``aligned`` is a Tensor (M, K, D) holding all objects of the sample's
    views. Both cues come back as (1, D_r).
    """
    g = linear(_masked_mean(aligned, aligned_valid), params.scope("rsn.cue_g"))
    o = linear(_masked_mean(target_tokens, target_valid), params.scope("rsn.cue_o"))
    return g, o


def assemble_input(question, region_embeddings, g, o, vocab, params):
    """``[g; o; question tokens]`` with each ``<region>`` replaced by that region's K embeddings."""
    toks = tokenize(question)
    n_slots = sum(t == REGION for t in toks)
    if n_slots != len(region_embeddings):
        raise ValueError(f"{n_slots} placeholders but {len(region_embeddings)} region embeddings")
    table = params["rsn.embed"]
    parts = [g, o]
    slot_map = []
    pos = 2
    run = []
    r = 0

    def flush():
        if run:
            parts.append(take(table, np.array(vocab.ids(run))))
            run.clear()

    for t in toks:
        if t == REGION:
            flush()
            emb = region_embeddings[r]
            parts.append(emb)
            slot_map.extend((pos + k, r) for k in range(emb.shape[0]))
            pos += emb.shape[0]
            r += 1
        else:
            run.append(t)
            pos += 1
    flush()
    return ReasoningInput(concat(parts, axis=0), slot_map, toks)


def option_embedding(text, region_embeddings, vocab, params):
    """Mean over an option's token embeddings (region placeholders contribute K rows each)."""
    toks = tokenize(text)
    table = params["rsn.embed"]
    rows = []
    r = 0
    for t in toks:
        if t == REGION:
            rows.append(region_embeddings[r])
            r += 1
        else:
            rows.append(take(table, np.array([vocab.index.get(t, 0)])))
    if not rows:
        rows.append(take(table, np.array([0])))
    return mean(concat(rows, axis=0), axis=0)


def context_vector(e_q, params):
    """Single-head self-attention over the sequence, mean-pooled."""
    if e_q.shape[0] == 0:
        raise ValueError("empty reasoning sequence")
    q = matmul(e_q, params["rsn.attn.wq"])
    k = matmul(e_q, params["rsn.attn.wk"])
    v = matmul(e_q, params["rsn.attn.wv"])
    att = masked_softmax(matmul(q, k.T) * (1.0 / math.sqrt(e_q.shape[1])))
    return mean(matmul(att, v), axis=0)


def option_log_scores(e_q, options, params):
    """Log-softmax over bilinear scores ``ctx . W . option`` for stacked option embeddings."""
    if options.shape[0] < 2:
        raise ValueError("need at least two options")
    ctx = context_vector(e_q, params)
    u = matmul(reshape(ctx, (1, -1)), params["rsn.bilinear"])
    scores = sum_(mul(options, u), axis=-1)
    return log_softmax(scores)


def aggregate(log_scores):
    """Mean of per-view-pair option log-scores; the distribution is its softmax."""
    if len(log_scores) == 1:
        return log_scores[0]
    total = log_scores[0]
    for s in log_scores[1:]:
        total = total + s
    return total * (1.0 / len(log_scores))


def distribution(log_scores):
    x = log_scores.data
    p = np.exp(x - x.max())
    p = p / np.sort(p).sum()
    return AnswerDistribution(log_scores, p, int(np.argmax(p)))


def score_answers(e_q, options, params):
    return distribution(option_log_scores(e_q, options, params))


def vqa_loss(log_scores, gold):
    """Option-level cross-entropy ``-log p_gold`` from (aggregated) log-scores."""
    if not 0 <= gold < log_scores.shape[0]:
        raise IndexError(f"gold {gold} outside {log_scores.shape[0]} options")
    return -take(log_softmax(log_scores), gold)
