"""Seventeen cross-view question tasks instantiated from scene ground truth,
their re-derivation checks, corpus balancing and scene-disjoint splits."""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .reasoner import REGION, tokenize
from .scene_synth import geometric_relations, in_contact

TASKS = tuple(f"Q{k}" for k in range(1, 18))
CATEGORIES = {
    "Correspondence": ("Q1", "Q2", "Q3", "Q4", "Q5"),
    "Vis/Occ": ("Q6", "Q7", "Q8"),
    "Geometric": ("Q9", "Q10", "Q11", "Q12", "Q13", "Q14", "Q15", "Q16"),
    "Physical": ("Q17",),
}
CATEGORY_OF = {t: c for c, ts in CATEGORIES.items() for t in ts}
NONE_OPTION = "none of these"

# margins that keep every gold answer well away from a numerical coin flip
SCALE_MARGIN = math.log(1.15)
GROWTH_MARGIN = math.log(1.10)
COMPLETE_MARGIN = 0.15
NN_MARGIN = 1.10
LR_MARGIN = 4.0
DEPTH_MARGIN = 0.05

TEMPLATES = {
    "Q1": ("<region> is seen in the first view. which region in the second view shows the same object?",
           "find <region> from the first view among the regions of the second view."),
    "Q2": ("which of the two regions in the second view is the same object as <region>?",
           "<region> appears in the first view. pick its match in the second view."),
    "Q3": ("which region in the second view is <region>, if any?",
           "<region> is from the first view. which second view region shows it?"),
    "Q4": ("<region> and <region> appear in the first view. which pair in the second view matches them in order?",
           "match <region> and <region> to the second view, keeping their order."),
    "Q5": ("are <region> and <region> the same object?",
           "do <region> in the first view and <region> in the second view show one object?"),
    "Q6": ("is <region> visible in the second view?",
           "can <region> from the first view be seen in the second view?"),
    "Q7": ("which of these objects from the first view is missing from the second view?",
           "which first view object cannot be seen in the second view?"),
    "Q8": ("which object hides part of <region>?",
           "in the first view, what occludes <region>?"),
    "Q9": ("in the second view, which object is closest to <region>?",
           "which second view object is the nearest neighbour of <region>?"),
    "Q10": ("does <region> look larger or smaller in the second view?",
            "from the first view to the second, does <region> get larger or smaller?"),
    "Q11": ("is <region> more or less complete than <region>?",
            "in the first view, is <region> more or less visible than <region>?"),
    "Q12": ("is the object more or less complete in <region> than in <region>?",
            "compared with the first view, is <region> more or less complete than <region>?"),
    "Q13": ("are <region> and <region> flipped left to right in the second view?",
            "does the left right order of <region> and <region> flip between the views?"),
    "Q14": ("does <region> move more or less than <region> between the views?",
            "across the two views, is the displacement of <region> more or less than that of <region>?"),
    "Q15": ("is the depth order of <region> and <region> the same in both views?",
            "do <region> and <region> keep their front back order across the views?"),
    "Q16": ("does <region> grow more or less than <region> in the second view?",
            "from the first view to the second, does <region> scale up more or less than <region>?"),
    "Q17": ("<region> and <region> overlap in the first view. are they in physical contact?",
            "<region> and <region> look overlapping. do they actually touch?"),
}
BINARY_TEXT = {
    "Q5": ("yes", "no"), "Q6": ("yes", "no"), "Q10": ("larger", "smaller"), "Q11": ("more", "less"),
    "Q12": ("more", "less"), "Q13": ("flipped", "not flipped"), "Q14": ("more", "less"),
    "Q15": ("yes", "no"), "Q16": ("more", "less"), "Q17": ("contact", "no contact"),
}
N_OPTIONS = {t: (2 if t in BINARY_TEXT or t == "Q2" else 4) for t in TASKS}


def vocabulary():
    words = set()
    for pool in TEMPLATES.values():
        for text in pool:
            words.update(tokenize(text))
    for pair in BINARY_TEXT.values():
        for text in pair:
            words.update(tokenize(text))
    words.update(tokenize(NONE_OPTION))
    return sorted(words - {REGION})


@dataclass
class QASample:
    sample_id: str
    task_id: str
    question: str
    region_refs: list  # (view_id, track_id) pairs: question placeholders first, then options in order
    options: list
    gold: int
    scene_id: str
    views: tuple
    bundle: str = ""

    def n_question_refs(self):
        return sum(t == REGION for t in tokenize(self.question))

    def option_refs(self):
        """Region refs grouped per option."""
        pos = self.n_question_refs()
        out = []
        for opt in self.options:
            n = sum(t == REGION for t in tokenize(opt))
            out.append([tuple(r) for r in self.region_refs[pos:pos + n]])
            pos += n
        return out

    def question_refs(self):
        return [tuple(r) for r in self.region_refs[:self.n_question_refs()]]

    def to_record(self):
        d = asdict(self)
        d["region_refs"] = [list(r) for r in self.region_refs]
        d["views"] = list(self.views)
        return d

    @classmethod
    def from_record(cls, d):
        return cls(d["sample_id"], d["task_id"], d["question"], [tuple(r) for r in d["region_refs"]],
                   list(d["options"]), int(d["gold"]), d["scene_id"], tuple(d["views"]), d.get("bundle", ""))


@dataclass
class SplitManifest:
    splits: dict  # name -> sorted scene ids
    ratios: dict
    seed: int = 0

    def to_text(self):
        lines = [f"seed {self.seed}"]
        for name in self.splits:
            lines.append(f"split {name} {self.ratios[name]!r} {','.join(self.splits[name])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        splits, ratios, seed = {}, {}, 0
        for line in text.splitlines():
            parts = line.split(" ")
            if parts[0] == "seed":
                seed = int(parts[1])
            elif parts[0] == "split":
                ids = parts[3] if len(parts) > 3 else ""
                splits[parts[1]] = [s for s in ids.split(",") if s]
                ratios[parts[1]] = float(parts[2])
        return cls(splits, ratios, seed)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def build_split(scene_ids, ratios, seed=0):
    """Shuffle scene ids with ``seed`` and cut them by ``ratios`` (largest-remainder rounding)."""
    if not isinstance(ratios, dict):
        ratios = list(ratios)
        names = ["train", "eval"] if len(ratios) == 2 else [f"split{i}" for i in range(len(ratios))]
        ratios = dict(zip(names, ratios))
    if abs(sum(ratios.values()) - 1.0) > 1e-9 or any(r < 0 for r in ratios.values()):
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    ids = sorted(set(scene_ids))
    if len(ids) < len(ratios):
        raise ConfigError(f"{len(ids)} scenes cannot fill {len(ratios)} splits")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    names = list(ratios)
    exact = [ratios[n] * len(ids) for n in names]
    counts = [int(math.floor(x)) for x in exact]
    rest = len(ids) - sum(counts)
    by_rem = sorted(range(len(names)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in by_rem[:rest]:
        counts[i] += 1
    splits, pos = {}, 0
    for n, c in zip(names, counts):
        splits[n] = sorted(order[pos:pos + c])
        pos += c
    return SplitManifest(splits, dict(ratios), int(seed))


# --------------------------------------------------------------- builders


class _Pair:
    """Ground truth of one scene seen through the ordered view pair (a, b)."""

    def __init__(self, scene, rel, a, b):
        self.scene, self.rel, self.a, self.b = scene, rel, a, b
        self.P = {v: {p.track_id: p for p in scene.projections[v]} for v in (a, b)}
        self.A = sorted(self.P[a])
        self.B = sorted(self.P[b])
        self.shared = [t for t in self.A if t in self.P[b]]
        self.key = (min(a, b), max(a, b))

    def scale(self, t):
        r = self.rel.scale[self.key][t]
        return r if self.a < self.b else 1.0 / r

    def flip(self, s, t):
        return self.rel.flip[self.key].get((s, t))

    def consistent(self, s, t):
        return self.rel.depth_consistent[self.key].get((s, t))

    def disp(self, t):
        return self.rel.displacement[self.key][t]

    def x(self, v, t):
        return self.P[v][t].center2d[0]


def _pick(rng, seq, k):
    seq = list(seq)
    idx = rng.choice(len(seq), size=k, replace=False)
    return [seq[i] for i in idx]


def _mc(ctx, rng, gold_track, pool, n, view):
    """Region options: gold first, distractors drawn from ``pool``."""
    others = _pick(rng, [t for t in pool if t != gold_track], n - 1)
    return ["<region>"] * n, [(view, gold_track)] + [(view, t) for t in others]


def _b_q1(ctx, rng, n=4):
    out = []
    if len(ctx.B) < n:
        return out
    for t in ctx.shared:
        opts, refs = _mc(ctx, rng, t, ctx.B, n, ctx.b)
        out.append(([(ctx.a, t)] + refs, opts, 0))
    return out


def _b_q2(ctx, rng):
    return _b_q1(ctx, rng, 2)


def _b_q3(ctx, rng):
    out = []
    if len(ctx.B) < 3:
        return out
    for t in ctx.A:
        if t in ctx.P[ctx.b]:
            opts, refs = _mc(ctx, rng, t, ctx.B, 3, ctx.b)
            out.append(([(ctx.a, t)] + refs, opts + [NONE_OPTION], 0))
        else:
            picks = _pick(rng, ctx.B, 3)
            out.append(([(ctx.a, t)] + [(ctx.b, x) for x in picks], ["<region>"] * 3 + [NONE_OPTION], 3))
    return out


def _b_q4(ctx, rng):
    out = []
    if len(ctx.B) < 3 or len(ctx.shared) < 2:
        return out
    ordered = [(s, t) for s in ctx.B for t in ctx.B if s != t]
    for s, t in [(s, t) for s in ctx.shared for t in ctx.shared if s != t]:
        rest = [p for p in ordered if p not in ((s, t), (t, s))]
        pairs = [(s, t), (t, s)] + _pick(rng, rest, 2)
        refs = [(ctx.a, s), (ctx.a, t)] + [(ctx.b, x) for p in pairs for x in p]
        out.append((refs, ["<region> <region>"] * 4, 0))
    return out


def _b_q5(ctx, rng):
    yes, no = BINARY_TEXT["Q5"]
    out = []
    for t in ctx.A:
        if t in ctx.P[ctx.b]:
            out.append(([(ctx.a, t), (ctx.b, t)], [yes, no], 0))
        others = [x for x in ctx.B if x != t]
        if others:
            out.append(([(ctx.a, t), (ctx.b, _pick(rng, others, 1)[0])], [yes, no], 1))
    return out


def _b_q6(ctx, rng):
    yes, no = BINARY_TEXT["Q6"]
    return [([(ctx.a, t)], [yes, no], 0 if t in ctx.P[ctx.b] else 1) for t in ctx.A]


def _b_q7(ctx, rng):
    out = []
    exclusive = [t for t in ctx.A if t not in ctx.P[ctx.b]]
    if len(ctx.shared) < 3:
        return out
    for t in exclusive:
        others = _pick(rng, ctx.shared, 3)
        out.append(([(ctx.a, x) for x in [t] + others], ["<region>"] * 4, 0))
    return out


def _top_occluder(p):
    if not p.stolen:
        return None
    return min(p.stolen, key=lambda k: (-p.stolen[k], k))


def _b_q8(ctx, rng):
    out = []
    for t in ctx.A:
        p = ctx.P[ctx.a][t]
        top = _top_occluder(p)
        if top is None or top not in ctx.P[ctx.a]:
            continue
        clean = [x for x in ctx.A if x != t and x not in p.occluder_ids]
        if len(clean) < 3:
            continue
        refs = [(ctx.a, t), (ctx.a, top)] + [(ctx.a, x) for x in _pick(rng, clean, 3)]
        out.append((refs, ["<region>"] * 4, 0))
    return out


def _b_q9(ctx, rng):
    out = []
    if len(ctx.B) < 5:
        return out
    for t in ctx.shared:
        c = np.array(ctx.P[ctx.b][t].center2d)
        dist = sorted((float(np.hypot(*(np.array(ctx.P[ctx.b][x].center2d) - c))), x) for x in ctx.B if x != t)
        if dist[1][0] < NN_MARGIN * dist[0][0]:
            continue
        near = dist[0][1]
        rest = [x for x in ctx.B if x not in (t, near)]
        refs = [(ctx.a, t), (ctx.b, near)] + [(ctx.b, x) for x in _pick(rng, rest, 3)]
        out.append((refs, ["<region>"] * 4, 0))
    return out


def _b_q10(ctx, rng):
    big, small = BINARY_TEXT["Q10"]
    out = []
    for t in ctx.shared:
        r = math.log(ctx.scale(t))
        if abs(r) >= SCALE_MARGIN:
            out.append(([(ctx.a, t)], [big, small], 0 if r > 0 else 1))
    return out


def _pairs(ts):
    return [(s, t) for s in ts for t in ts if s < t]


def _b_q11(ctx, rng):
    more, less = BINARY_TEXT["Q11"]
    out = []
    for s, t in _pairs(ctx.A):
        fs, ft = ctx.P[ctx.a][s].visible_fraction, ctx.P[ctx.a][t].visible_fraction
        if abs(fs - ft) >= COMPLETE_MARGIN:
            if rng.random() < 0.5:
                s, t, fs, ft = t, s, ft, fs
            out.append(([(ctx.a, s), (ctx.a, t)], [more, less], 0 if fs > ft else 1))
    return out


def _b_q12(ctx, rng):
    more, less = BINARY_TEXT["Q12"]
    out = []
    for t in ctx.shared:
        fa, fb = ctx.P[ctx.a][t].visible_fraction, ctx.P[ctx.b][t].visible_fraction
        if abs(fb - fa) >= COMPLETE_MARGIN:
            out.append(([(ctx.b, t), (ctx.a, t)], [more, less], 0 if fb > fa else 1))
    return out


def _b_q13(ctx, rng):
    yes, no = BINARY_TEXT["Q13"]
    out = []
    for s, t in _pairs(ctx.shared):
        f = ctx.flip(s, t)
        if f is None:
            continue
        if min(abs(ctx.x(ctx.a, s) - ctx.x(ctx.a, t)), abs(ctx.x(ctx.b, s) - ctx.x(ctx.b, t))) < LR_MARGIN:
            continue
        out.append(([(ctx.a, s), (ctx.a, t)], [yes, no], 0 if f else 1))
    return out


def _b_q14(ctx, rng):
    more, less = BINARY_TEXT["Q14"]
    out = []
    for s, t in _pairs(ctx.shared):
        ds, dt = ctx.disp(s), ctx.disp(t)
        if min(ds, dt) > 0 and abs(math.log(ds / dt)) >= SCALE_MARGIN:
            if rng.random() < 0.5:
                s, t, ds, dt = t, s, dt, ds
            out.append(([(ctx.a, s), (ctx.a, t)], [more, less], 0 if ds > dt else 1))
    return out


def _b_q15(ctx, rng):
    yes, no = BINARY_TEXT["Q15"]
    out = []
    for s, t in _pairs(ctx.shared):
        c = ctx.consistent(s, t)
        if c is None:
            continue
        gap = min(abs(ctx.P[v][s].mean_depth - ctx.P[v][t].mean_depth) for v in (ctx.a, ctx.b))
        if gap >= DEPTH_MARGIN:
            out.append(([(ctx.a, s), (ctx.a, t)], [yes, no], 0 if c else 1))
    return out


def _b_q16(ctx, rng):
    more, less = BINARY_TEXT["Q16"]
    out = []
    for s, t in _pairs(ctx.shared):
        d = math.log(ctx.scale(s)) - math.log(ctx.scale(t))
        if abs(d) >= GROWTH_MARGIN:
            if rng.random() < 0.5:
                s, t, d = t, s, -d
            out.append(([(ctx.a, s), (ctx.a, t)], [more, less], 0 if d > 0 else 1))
    return out


def _b_q17(ctx, rng):
    yes, no = BINARY_TEXT["Q17"]
    out = []
    for s, t in ctx.scene.overlaps[ctx.a]:
        if s in ctx.P[ctx.a] and t in ctx.P[ctx.a]:
            out.append(([(ctx.a, s), (ctx.a, t)], [yes, no], 0 if in_contact(ctx.rel, s, t) else 1))
    return out


# -------------------------------------------------------------- derivers


def _track_option(opt_refs, track):
    hits = [k for k, refs in enumerate(opt_refs) if len(refs) == 1 and refs[0][1] == track]
    return hits[0] if len(hits) == 1 else None


def _text(options, word):
    return options.index(word) if options.count(word) == 1 else None


def _d_match(ctx, q, o, options):
    t = q[0][1]
    k = _track_option(o, t)
    if k is not None and o[k][0][0] == ctx.b:
        return k
    if NONE_OPTION in options and t not in ctx.P[ctx.b]:
        return _text(options, NONE_OPTION)
    return None


def _d_q4(ctx, q, o, options):
    want = [q[0][1], q[1][1]]
    hits = [k for k, refs in enumerate(o) if [r[1] for r in refs] == want]
    return hits[0] if len(hits) == 1 else None


def _d_q5(ctx, q, o, options):
    return _text(options, "yes" if q[0][1] == q[1][1] else "no")


def _d_q6(ctx, q, o, options):
    return _text(options, "yes" if q[0][1] in ctx.P[ctx.b] else "no")


def _d_q7(ctx, q, o, options):
    hits = [k for k, refs in enumerate(o) if refs[0][1] not in ctx.P[ctx.b]]
    return hits[0] if len(hits) == 1 else None


def _d_q8(ctx, q, o, options):
    top = _top_occluder(ctx.P[ctx.a][q[0][1]])
    return None if top is None else _track_option(o, top)


def _d_q9(ctx, q, o, options):
    near = ctx.rel.nearest.get(ctx.b, {}).get(q[0][1])
    return None if near is None else _track_option(o, near)


def _d_q10(ctx, q, o, options):
    t = q[0][1]
    if t not in ctx.shared:
        return None
    return _text(options, "larger" if ctx.scale(t) > 1 else "smaller")


def _d_q11(ctx, q, o, options):
    (v, s), (_, t) = q
    c = ctx.rel.completeness[v]
    return _text(options, "more" if c[s] > c[t] else "less")


def _d_q12(ctx, q, o, options):
    (v1, s), (v2, t) = q
    if s != t:
        return None
    c = ctx.rel.completeness
    return _text(options, "more" if c[v1][s] > c[v2][t] else "less")


def _d_q13(ctx, q, o, options):
    f = ctx.flip(q[0][1], q[1][1])
    return None if f is None else _text(options, "flipped" if f else "not flipped")


def _d_q14(ctx, q, o, options):
    s, t = q[0][1], q[1][1]
    if s not in ctx.shared or t not in ctx.shared:
        return None
    return _text(options, "more" if ctx.disp(s) > ctx.disp(t) else "less")


def _d_q15(ctx, q, o, options):
    c = ctx.consistent(q[0][1], q[1][1])
    return None if c is None else _text(options, "yes" if c else "no")


def _d_q16(ctx, q, o, options):
    s, t = q[0][1], q[1][1]
    if s not in ctx.shared or t not in ctx.shared:
        return None
    return _text(options, "more" if ctx.scale(s) > ctx.scale(t) else "less")


def _d_q17(ctx, q, o, options):
    s, t = sorted((q[0][1], q[1][1]))
    if (s, t) not in ctx.rel.overlap.get(ctx.a, set()):
        return None
    return _text(options, "contact" if in_contact(ctx.rel, s, t) else "no contact")


BUILDERS = {"Q1": _b_q1, "Q2": _b_q2, "Q3": _b_q3, "Q4": _b_q4, "Q5": _b_q5, "Q6": _b_q6, "Q7": _b_q7,
            "Q8": _b_q8, "Q9": _b_q9, "Q10": _b_q10, "Q11": _b_q11, "Q12": _b_q12, "Q13": _b_q13,
            "Q14": _b_q14, "Q15": _b_q15, "Q16": _b_q16, "Q17": _b_q17}
DERIVERS = {"Q1": _d_match, "Q2": _d_match, "Q3": _d_match, "Q4": _d_q4, "Q5": _d_q5, "Q6": _d_q6,
            "Q7": _d_q7, "Q8": _d_q8, "Q9": _d_q9, "Q10": _d_q10, "Q11": _d_q11, "Q12": _d_q12,
            "Q13": _d_q13, "Q14": _d_q14, "Q15": _d_q15, "Q16": _d_q16, "Q17": _d_q17}


def _group_refs(options, refs, n_q):
    groups, pos = [], n_q
    for opt in options:
        n = sum(t == REGION for t in tokenize(opt))
        groups.append(refs[pos:pos + n])
        pos += n
    return refs[:n_q], groups


def permute_options(sample, perm):
    """New sample whose option ``k`` is old option ``perm[k]``; refs and gold follow."""
    q, groups = _group_refs(sample.options, list(sample.region_refs), sample.n_question_refs())
    options = [sample.options[p] for p in perm]
    refs = list(q) + [r for p in perm for r in groups[p]]
    gold = list(perm).index(sample.gold)
    return QASample(sample.sample_id, sample.task_id, sample.question, refs, options, gold, sample.scene_id,
                    sample.views, sample.bundle)


def instantiate_qa(scene, task_id, rng, per_pair=2, rel=None):
    """Up to ``per_pair`` samples of ``task_id`` for every ordered view pair of ``scene``.

    Templates whose preconditions fail contribute nothing.
    """
    if task_id not in BUILDERS:
        raise ValueError(f"unknown task {task_id!r}")
    rel = rel or geometric_relations(scene)
    out = []
    ids = sorted(scene.projections)
    for a in ids:
        for b in ids:
            if a == b:
                continue
            ctx = _Pair(scene, rel, a, b)
            cands = BUILDERS[task_id](ctx, rng)
            if not cands:
                continue
            chosen = sorted(rng.choice(len(cands), size=min(per_pair, len(cands)), replace=False))
            for k, ci in enumerate(chosen):
                refs, options, gold = cands[ci]
                pool = TEMPLATES[task_id]
                question = pool[int(rng.integers(len(pool)))]
                s = QASample(f"{scene.scene_id}-{a}{b}-{task_id}-{k}", task_id, question,
                             [(int(v), int(t)) for v, t in refs], list(options), int(gold), scene.scene_id, (a, b))
                out.append(permute_options(s, rng.permutation(len(options))))
    return out


def validate_sample(sample, scene, rel=None):
    """Empty list when ``sample`` is well formed and its gold re-derives from ground truth."""
    bad = []
    if sample.task_id not in DERIVERS:
        return ["unknown-task"]
    if len(sample.options) != N_OPTIONS[sample.task_id]:
        bad.append("option-count")
    if not 0 <= sample.gold < len(sample.options):
        bad.append("gold-range")
    n_ph = sample.n_question_refs() + sum(sum(t == REGION for t in tokenize(o)) for o in sample.options)
    if n_ph != len(sample.region_refs):
        bad.append("placeholder-count")
    if sample.scene_id != scene.scene_id:
        bad.append("scene-mismatch")
    a, b = sample.views
    if a == b or a not in scene.projections or b not in scene.projections:
        return bad + ["bad-views"]
    for v, t in sample.region_refs:
        if v not in (a, b) or v not in scene.projections or scene.index_of(v, t) is None:
            bad.append("dangling-ref")
            break
    if bad:
        return bad
    keys = [(o, tuple(map(tuple, g))) for o, g in zip(sample.options, sample.option_refs())]
    if len(set(keys)) != len(keys):
        bad.append("duplicate-option")
    ctx = _Pair(scene, rel or geometric_relations(scene), a, b)
    try:
        gold = DERIVERS[sample.task_id](ctx, sample.question_refs(), sample.option_refs(), sample.options)
    except (KeyError, IndexError):
        gold = None
    if gold is None:
        bad.append("underivable")
    elif gold != sample.gold:
        bad.append("gold-mismatch")
    return bad


# ----------------------------------------------------------------- corpus


def _content_key(s):
    if s.task_id in BINARY_TEXT:
        return s.options[s.gold]
    if s.task_id == "Q3":
        return "none" if s.options[s.gold] == NONE_OPTION else "region"
    return None


def balance(samples, seed=0):
    """Equalise binary gold contents, hold Q3's "none" answers at one in four, then spread
    gold positions evenly over option slots per task."""
    rng = np.random.default_rng([int(seed), 71])
    by_task = {}
    for s in samples:
        by_task.setdefault(s.task_id, []).append(s)
    out = []
    for task in TASKS:
        group = by_task.get(task, [])
        if not group:
            continue
        keys = [_content_key(s) for s in group]
        if keys[0] is not None:
            classes = {}
            for s, k in zip(group, keys):
                classes.setdefault(k, []).append(s)
            if task == "Q3":
                n_none, n_reg = len(classes.get("none", [])), len(classes.get("region", []))
                quota = {"none": min(n_none, n_reg // 3), "region": min(n_reg, 3 * n_none)}
            else:
                m = min(len(classes.get(w, [])) for w in BINARY_TEXT[task])
                quota = {w: m for w in BINARY_TEXT[task]}
            keep = set()
            for k in sorted(classes):
                members = classes[k]
                idx = rng.permutation(len(members))[:quota.get(k, 0)]
                keep.update(members[i].sample_id for i in idx)
            group = [s for s in group if s.sample_id in keep]
        n_opt = N_OPTIONS[task]
        order = rng.permutation(len(group))
        targets = np.concatenate([rng.permutation(n_opt) for _ in range(-(-len(group) // n_opt))] or [[]])
        placed = [None] * len(group)
        for slot, gi in enumerate(order):
            s = group[gi]
            tgt = int(targets[slot])
            perm = list(range(n_opt))
            perm[s.gold], perm[tgt] = perm[tgt], perm[s.gold]
            placed[gi] = permute_options(s, perm)
        out.extend(placed)
    return out


def build_corpus(scenes, seed=0, per_pair=2, tasks=TASKS, bundle=""):
    """Generate, validate and balance samples for ``scenes`` (any order; output is by scene id)."""
    samples = []
    for scene in sorted(scenes, key=lambda s: s.scene_id):
        rel = geometric_relations(scene)
        for task in tasks:
            rng = np.random.default_rng([int(seed), int(scene.seed), int(task[1:])])
            for s in instantiate_qa(scene, task, rng, per_pair, rel):
                if not validate_sample(s, scene, rel):
                    s.bundle = bundle
                    samples.append(s)
    return balance(samples, seed)


def write_corpus(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def read_corpus(path):
    with open(path, encoding="utf-8") as fh:
        return [QASample.from_record(json.loads(line)) for line in fh if line.strip()]


def gold_position_rates(samples):
    """Per task, fraction of samples whose gold sits at each option slot."""
    rates = {}
    for task in TASKS:
        g = [s.gold for s in samples if s.task_id == task]
        if g:
            rates[task] = np.bincount(g, minlength=N_OPTIONS[task]) / len(g)
    return rates
