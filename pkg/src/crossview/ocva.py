"""Cross-attention fusion of matched object tokens and the two metric losses."""
from dataclasses import dataclass

import numpy as np

from .errors import EmptyRegionError
from .numcore import (Tensor, add_layer_norm, add_mha, add_mlp, layer_norm, log_softmax, mean, mha_forward,
                      mlp_forward, mul, relu, sqrt, sum_, take)


@dataclass
class OcvaConfig:
    heads: int = 8
    depth: int = 2
    tau: float = 0.07
    margin: float = 0.5
    ffn_mult: int = 4

    def __post_init__(self):
        if self.heads < 1 or self.tau <= 0 or self.margin < 0:
            raise ValueError(f"invalid OcvaConfig {self}")


@dataclass
class AlignedTokens:
    tokens: object  # Tensor (K, D)
    validity: np.ndarray
    provenance: tuple = None


def init_params(ps, d, cfg, rng):
    for b in range(cfg.depth):
        add_mha(ps, f"ocva.{b}.mha", d, rng)
        add_layer_norm(ps, f"ocva.{b}.ln1", d)
        add_mlp(ps, f"ocva.{b}.ffn", d, cfg.ffn_mult * d, d, rng)
        add_layer_norm(ps, f"ocva.{b}.ln2", d)


def fuse_batch(src, src_valid, tgt, tgt_valid, cfg, params):
    """Apply ``depth`` blocks of LN(T + MHA(T, T~, T~)) then LN(T + FFN(T)).

    Shapes are (M, K, D); invalid source slots are zeroed on output.
    """
    src_valid = np.asarray(src_valid, dtype=bool)
    if src_valid.size and np.any(src_valid.sum(axis=-1) == 0):
        raise EmptyRegionError("fusion source has no valid tokens")
    t = src
    for b in range(cfg.depth):
        ln1, ln2 = params.scope(f"ocva.{b}.ln1"), params.scope(f"ocva.{b}.ln2")
        att = mha_forward(t, tgt, tgt, params.scope(f"ocva.{b}.mha"), cfg.heads, tgt_valid)
        t = layer_norm(t + att, ln1["gain"], ln1["bias"])
        t = layer_norm(t + mlp_forward(t, params.scope(f"ocva.{b}.ffn")), ln2["gain"], ln2["bias"])
    return mul(t, src_valid[..., None].astype(np.float64))


def fuse(src, tgt, cfg, params):
    """Single-object fusion on ObjectTokens; returns AlignedTokens."""
    s = src.tokens if isinstance(src.tokens, Tensor) else Tensor(src.tokens)
    t = tgt.tokens if isinstance(tgt.tokens, Tensor) else Tensor(tgt.tokens)
    out = fuse_batch(s, src.validity, t, tgt.validity, cfg, params)
    return AlignedTokens(out, np.asarray(src.validity, dtype=bool).copy(), (src.source, tgt.source))


def supcon_loss(z, labels, tau=0.07):
    """Supervised contrastive loss over unit vectors with integer labels.

    Returns ``(loss, n_anchors)``; anchors without positives are skipped and
    ``n_anchors == 0`` flags an all-skipped batch (loss 0).
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    counts = same.sum(axis=1)
    anchors = counts > 0
    if n < 2 or not anchors.any():
        return Tensor(0.0), 0
    logits = (z @ z.T) * (1.0 / tau)
    logits = logits + np.where(np.eye(n, dtype=bool), -1e9, 0.0)
    logp = log_softmax(logits)
    w = np.where(anchors[:, None], same / np.maximum(counts, 1)[:, None], 0.0)
    loss = -sum_(mul(logp, w)) * (1.0 / anchors.sum())
    return loss, int(anchors.sum())


def euclidean(a, b, eps=1e-12):
    d = a - b
    return sqrt(sum_(mul(d, d), axis=-1) + eps * eps)


def triplet_loss(za, zb, matches, margin=0.5):
    """Hard-negative triplet loss; the negative is the most similar non-matching target."""
    matches = list(matches)
    nb = zb.shape[0]
    if not matches or nb < 2:
        return Tensor(0.0)
    sim = za.data @ zb.data.T
    anc, pos, neg = [], [], []
    for i, j in matches:
        row = sim[i].copy()
        row[j] = -np.inf
        anc.append(i)
        pos.append(j)
        neg.append(int(np.argmax(row)))
    anc, pos, neg = np.array(anc), np.array(pos), np.array(neg)
    a = take(za, anc)
    d_ap = euclidean(a, take(zb, pos))
    d_an = euclidean(a, take(zb, neg))
    return mean(relu(d_ap - d_an + margin))
