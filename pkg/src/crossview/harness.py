"""Data generation, the composite training loop, checkpoints and evaluation."""
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import art, ocva, qa_gen, reasoner, retrieval
from .art import ArtConfig
from .ocva import OcvaConfig
from .errors import CheckpointError, ConfigError, ContaminationError, GenerationError, TrainingError
from .numcore import (OptimState, ParamSet, Tensor, adamw_step, concat, cosine_lr, mean, read_tensor_store, stack,
                      take, write_tensor_store)
from .scene_synth import EncoderConfig, SceneConfig, generate_scene, load_bundle, render_scene_features, save_bundle

log = logging.getLogger(__name__)

CKPT_FORMAT = "crossview-checkpoint"
CKPT_VERSION = 1
# tasks whose answer lives in the first view alone; their scores are averaged over every partner view
VIEW_FREE = ("Q8", "Q11", "Q17")


@dataclass
class TrainConfig:
    lambda_vqa: float = 0.5
    lambda_sc: float = 1.0
    lambda_tri: float = 0.1
    steps: int = 300
    batch: int = 8
    seed: int = 0
    mode: str = "greedy"
    retrieved_fraction: float = 0.5
    lr: float = 3e-3
    weight_decay: float = 0.01
    qa_per_pair: int = 4
    d_c: int = 256
    g_hidden: int = 256
    d_r: int = 64
    adapter_hidden: int = 128
    n_train_scenes: int = 200
    n_eval_scenes: int = 60
    data_seed: int = 0
    train_per_pair: int = 2
    eval_per_pair: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(noise=2.5))
    art: ArtConfig = field(default_factory=ArtConfig)
    ocva: OcvaConfig = field(default_factory=OcvaConfig)

    def validate(self):
        if min(self.lambda_vqa, self.lambda_sc, self.lambda_tri) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be >= 1")
        if self.mode not in retrieval.MODES:
            raise ConfigError(f"unknown matching mode {self.mode!r}")
        if not 0.0 <= self.retrieved_fraction <= 1.0:
            raise ConfigError("retrieved_fraction must lie in [0, 1]")
        if self.encoder.d_v < self.scene.d_app + self.encoder.nuisance_rank:
            raise ConfigError("encoder.d_v must hold the appearance and nuisance subspaces")
        if self.encoder.d_v % self.ocva.heads:
            raise ConfigError(f"encoder.d_v {self.encoder.d_v} is not divisible by {self.ocva.heads} heads")
        self.scene.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        subs = {"scene": SceneConfig, "encoder": EncoderConfig, "art": ArtConfig, "ocva": OcvaConfig}
        for k, typ in subs.items():
            if k in d:
                d[k] = typ(**d[k])
        return cls(**d)


_SUBS = ("scene", "encoder", "art", "ocva")


def _coerce(value, default, key):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def apply_overrides(cfg, pairs):
    """Set ``key=value`` overrides; nested fields use ``scene.image_h`` style keys."""
    for key, value in pairs:
        target, name = cfg, key
        if "." in key:
            sub, name = key.split(".", 1)
            if sub not in _SUBS:
                raise ConfigError(f"unknown config section {sub!r}")
            target = getattr(cfg, sub)
        if name in _SUBS or not hasattr(target, name):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(value, getattr(target, name), key))
    return cfg


def parse_config_text(text, cfg=None):
    cfg = cfg or TrainConfig()
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return apply_overrides(cfg, pairs)


def load_config(path, cfg=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), cfg)


def config_text(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _SUBS:
            for g in dataclasses.fields(v):
                lines.append(f"{f.name}.{g.name} = {getattr(v, g.name)}")
        else:
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------- data


def data_paths(root):
    return {"scenes": os.path.join(root, "scenes"), "split": os.path.join(root, "split.txt"),
            "train": os.path.join(root, "train.jsonl"), "eval": os.path.join(root, "eval.jsonl"),
            "config": os.path.join(root, "config.txt")}


def generate_scenes(cfg, n, first_seed):
    """``n`` scenes from consecutive seeds; seeds whose layout cannot be placed are skipped."""
    scenes, seed = [], first_seed
    while len(scenes) < n:
        try:
            s = generate_scene(cfg.scene, seed)
        except GenerationError:
            log.warning("scene seed %d could not be placed, skipping", seed)
        else:
            scenes.append(render_scene_features(s, cfg.encoder))
        seed += 1
    return scenes


def generate_data(cfg, root):
    """Scenes, the scene-disjoint split and both QA corpora under ``root``."""
    cfg.validate()
    p = data_paths(root)
    os.makedirs(root, exist_ok=True)
    n = cfg.n_train_scenes + cfg.n_eval_scenes
    scenes = generate_scenes(cfg, n, cfg.data_seed * 1_000_000)
    save_bundle(scenes, p["scenes"])
    manifest = qa_gen.build_split([s.scene_id for s in scenes],
                                  {"train": cfg.n_train_scenes / n, "eval": cfg.n_eval_scenes / n}, cfg.data_seed)
    manifest.save(p["split"])
    by_id = {s.scene_id: s for s in scenes}
    for name, per_pair in (("train", cfg.train_per_pair), ("eval", cfg.eval_per_pair)):
        chosen = [by_id[i] for i in manifest.splits[name]]
        corpus = qa_gen.build_corpus(chosen, cfg.data_seed, per_pair, bundle="scenes")
        qa_gen.write_corpus(corpus, p[name])
    with open(p["config"], "w", encoding="utf-8") as fh:
        fh.write(config_text(cfg))
    return manifest


class RegionCache:
    """Parameter-free ART preprocessing, computed once per (scene, view, track)."""

    def __init__(self, scenes, art_cfg):
        self.scenes = scenes
        self.cfg = art_cfg
        self._cells = {}

    def tracks(self, scene_id, view):
        return [p.track_id for p in self.scenes[scene_id].projections[view]]

    def cells(self, scene_id, view):
        key = (scene_id, view)
        if key not in self._cells:
            scene = self.scenes[scene_id]
            fmap = scene.features[view]
            self._cells[key] = [art.prepare_region(fmap, p.mask, self.cfg,
                                                   seed=scene.seed * 1000 + view * 100 + p.track_id)
                                for p in scene.projections[view]]
        return self._cells[key]


# ------------------------------------------------------------------ model


def init_model(cfg, vocab):
    ps = ParamSet()
    rng = np.random.default_rng([cfg.seed, 5])
    d_v = cfg.encoder.d_v
    art.init_params(ps, d_v, cfg.art, rng)
    retrieval.init_params(ps, d_v, cfg.d_c, cfg.g_hidden, rng)
    ocva.init_params(ps, d_v, cfg.ocva, rng)
    reasoner.init_params(ps, d_v, cfg.d_r, len(vocab), cfg.adapter_hidden, rng)
    return ps


@dataclass
class PairResult:
    scene_id: str
    a: int
    b: int
    tracks: dict  # view -> track ids in row order
    S: np.ndarray
    pi: np.ndarray  # a-row -> b-row, -1 unmatched
    slot: dict  # view -> first fused row of that view's objects for this pair


@dataclass
class BatchOutput:
    tokens: object
    validity: np.ndarray
    z: object
    view_rows: dict  # (scene_id, view) -> (start, count) into tokens / z
    fused: object
    fused_valid: np.ndarray
    pairs: list


def true_mapping(tracks_a, tracks_b):
    where = {t: j for j, t in enumerate(tracks_b)}
    return np.array([where.get(t, -1) for t in tracks_a], dtype=np.int64)


def run_pairs(cfg, params, cache, jobs):
    """Tokenise, embed, match and fuse a list of ``(scene_id, a, b, mode)`` jobs in one batch.

    ``mode`` is a retrieval mode or ``"true"`` for the ground-truth mapping.
    """
    view_rows, cells = {}, []
    for sid, a, b, _ in jobs:
        for v in (a, b):
            if (sid, v) not in view_rows:
                c = cache.cells(sid, v)
                view_rows[(sid, v)] = (len(cells), len(c))
                cells.extend(c)
    tokens, validity = art.tokenize_cells(cells, cfg.art, params)
    z = retrieval.embed_batch(retrieval.pool_batch(tokens, validity), params) if cells else None
    M = len(cells)
    src, tgt, pairs = [], [], []
    for sid, a, b, mode in jobs:
        (sa, na), (sb, nb) = view_rows[(sid, a)], view_rows[(sid, b)]
        ta, tb = cache.tracks(sid, a), cache.tracks(sid, b)
        S = retrieval.similarity_matrix(z.data[sa:sa + na], z.data[sb:sb + nb]).S
        if mode == "true":
            pi = true_mapping(ta, tb)
        else:
            pi = retrieval.match(S, mode).pi
        inv = np.full(nb, -1, dtype=np.int64)
        for i, j in enumerate(pi):
            if j >= 0:
                inv[j] = i
        slot = {a: len(src)}
        src.extend(range(sa, sa + na))
        tgt.extend(sb + j if j >= 0 else M for j in pi)
        slot[b] = len(src)
        src.extend(range(sb, sb + nb))
        tgt.extend(sa + i if i >= 0 else M for i in inv)
        pairs.append(PairResult(sid, a, b, {a: ta, b: tb}, S, pi, slot))
    src, tgt = np.array(src, dtype=np.int64), np.array(tgt, dtype=np.int64)
    K, d = cfg.art.K, cfg.encoder.d_v
    padded = concat([tokens, Tensor(np.zeros((1, K, d)))], axis=0)
    pvalid = np.concatenate([validity, np.zeros((1, K), dtype=bool)])
    fused = ocva.fuse_batch(take(tokens, src), validity[src], take(padded, tgt), pvalid[tgt], cfg.ocva, params)
    return BatchOutput(tokens, validity, z, view_rows, fused, validity[src], pairs)


def _refs_in_pair(pr, sample):
    rows = []
    for v, t in sample.region_refs:
        rows.append(pr.slot[v] + pr.tracks[v].index(t))
    return rows


def sample_log_scores(cfg, params, vocab, out, pr, adapted, sample):
    """Option log-scores for ``sample`` using the fused tokens of pair ``pr``."""
    rows = _refs_in_pair(pr, sample)
    n_q = sample.n_question_refs()
    emb = [take(adapted, r) for r in rows]
    lo, hi = pr.slot[pr.a], pr.slot[pr.b] + len(pr.tracks[pr.b])
    g, o = reasoner.scene_and_target_cues(take(out.fused, np.arange(lo, hi)), out.fused_valid[lo:hi],
                                          take(out.fused, rows[0]), out.fused_valid[rows[0]], params)
    e_q = reasoner.assemble_input(sample.question, emb[:n_q], g, o, vocab, params).sequence
    opts, pos = [], n_q
    for text in sample.options:
        n = sum(tok == reasoner.REGION for tok in reasoner.tokenize(text))
        opts.append(reasoner.option_embedding(text, emb[pos:pos + n], vocab, params))
        pos += n
    return reasoner.option_log_scores(e_q, stack(opts), params)


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    params: ParamSet
    opt: OptimState
    config: TrainConfig
    step: int
    rng_state: dict
    train_scenes: list
    vocab: list


def save_checkpoint(ckpt, path):
    arrays = {name: t.data for name, t in ckpt.params.items()}
    for name in ckpt.params:
        if name in ckpt.opt.m:
            arrays[f"opt.m.{name}"] = ckpt.opt.m[name]
            arrays[f"opt.v.{name}"] = ckpt.opt.v[name]
    header = [("format", CKPT_FORMAT), ("version", CKPT_VERSION), ("step", ckpt.step), ("opt_t", ckpt.opt.t),
              ("config", json.dumps(ckpt.config.to_dict(), sort_keys=True, separators=(",", ":"))),
              ("rng", json.dumps(ckpt.rng_state, sort_keys=True, separators=(",", ":"))),
              ("vocab", json.dumps(ckpt.vocab, separators=(",", ":"))),
              ("train_scenes", ",".join(ckpt.train_scenes))]
    write_tensor_store(path, arrays, header)


def load_checkpoint(path):
    """Read a checkpoint directory; any inconsistency raises CheckpointError and returns nothing."""
    try:
        header, arrays = read_tensor_store(path)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint at {path}: {e}") from e
    if header.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint (format {header.get('format')!r})")
    if header.get("version") != str(CKPT_VERSION):
        raise CheckpointError(f"checkpoint version {header.get('version')} does not match supported "
                              f"version {CKPT_VERSION}")
    try:
        cfg = TrainConfig.from_dict(json.loads(header["config"]))
        rng_state = json.loads(header["rng"])
        vocab = json.loads(header["vocab"])
        step, opt_t = int(header["step"]), int(header["opt_t"])
        train_scenes = [s for s in header.get("train_scenes", "").split(",") if s]
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {e}") from e
    ps = ParamSet()
    opt = OptimState(lr=cfg.lr, total_steps=cfg.steps, weight_decay=cfg.weight_decay, t=opt_t)
    for name, arr in arrays.items():
        if name.startswith("opt.m."):
            opt.m[name[6:]] = arr
        elif name.startswith("opt.v."):
            opt.v[name[6:]] = arr
        else:
            ps.add(name, arr)
    if set(opt.m) - set(ps.tensors) or set(opt.m) != set(opt.v):
        raise CheckpointError(f"optimizer moments in {path} do not match the parameters")
    ps.step = step
    return Checkpoint(ps, opt, cfg, step, rng_state, train_scenes, vocab)


# ------------------------------------------------------------------ train


TRACE_HEADER = "step\ttotal\tvqa\tsupcon\ttriplet\tlr\tsamples"


def _trace_line(row):
    return "\t".join([str(row[0])] + [repr(float(x)) for x in row[1:6]] + [str(row[6])])


def _pair_pool(scenes, ids):
    pool = []
    for sid in sorted(ids):
        vs = sorted(scenes[sid].projections)
        for i, a in enumerate(vs):
            for b in vs[i + 1:]:
                if scenes[sid].projections[a] and scenes[sid].projections[b]:
                    pool.append((sid, a, b))
    return pool


def training_step(cfg, params, vocab, cache, batch_jobs, samples_by_pair, rng):
    """Forward and backward for one batch; returns the total Tensor and component floats."""
    out = run_pairs(cfg, params, cache, batch_jobs)
    zero = Tensor(0.0)
    l_sc, l_tri, l_vqa = zero, zero, zero
    if cfg.lambda_sc > 0:
        # one contrastive batch per scene pair: both views' objects labelled by track id
        terms = []
        for pr in out.pairs:
            (sa, na), (sb, nb) = out.view_rows[(pr.scene_id, pr.a)], out.view_rows[(pr.scene_id, pr.b)]
            rows = np.concatenate([np.arange(sa, sa + na), np.arange(sb, sb + nb)])
            loss, n_anchor = ocva.supcon_loss(take(out.z, rows), pr.tracks[pr.a] + pr.tracks[pr.b], cfg.ocva.tau)
            if n_anchor:
                terms.append(loss)
        if terms:
            l_sc = mean(stack(terms))
    if cfg.lambda_tri > 0:
        terms = []
        for pr in out.pairs:
            (sa, na), (sb, nb) = out.view_rows[(pr.scene_id, pr.a)], out.view_rows[(pr.scene_id, pr.b)]
            gold = true_mapping(pr.tracks[pr.a], pr.tracks[pr.b])
            matches = [(i, int(j)) for i, j in enumerate(gold) if j >= 0]
            if matches and nb >= 2:
                terms.append(ocva.triplet_loss(take(out.z, np.arange(sa, sa + na)),
                                               take(out.z, np.arange(sb, sb + nb)), matches, cfg.ocva.margin))
        if terms:
            l_tri = mean(stack(terms))
    n_samples = 0
    if cfg.lambda_vqa > 0:
        adapted = reasoner.adapt_regions(out.fused, out.fused_valid, params)
        terms = []
        for pr in out.pairs:
            pool = samples_by_pair.get((pr.scene_id, pr.a, pr.b), [])
            if not pool:
                continue
            pick = rng.choice(len(pool), size=min(cfg.qa_per_pair, len(pool)), replace=False)
            for k in sorted(pick):
                s = pool[k]
                ls = sample_log_scores(cfg, params, vocab, out, pr, adapted, s)
                terms.append(reasoner.vqa_loss(ls, s.gold))
        n_samples = len(terms)
        if terms:
            l_vqa = mean(stack(terms))
    total = l_vqa * cfg.lambda_vqa + l_sc * cfg.lambda_sc + l_tri * cfg.lambda_tri
    return total, (float(l_vqa.data), float(l_sc.data), float(l_tri.data)), n_samples


def _index_samples(samples):
    by_pair = {}
    for s in sorted(samples, key=lambda s: s.sample_id):
        a, b = s.views
        by_pair.setdefault((s.scene_id, min(a, b), max(a, b)), []).append(s)
    return by_pair


def train(cfg, data_dir, out_dir, resume=None, stop_at=None):
    """Train on the corpus in ``data_dir``; checkpoint and loss trace go to ``out_dir``.

    ``resume`` is a checkpoint directory to continue from; ``stop_at`` ends the
    run early (after that many total steps) as if interrupted.
    """
    cfg.validate()
    paths = data_paths(data_dir)
    manifest = qa_gen.SplitManifest.load(paths["split"])
    train_ids = manifest.splits["train"]
    scenes = load_bundle(paths["scenes"], train_ids)
    samples = qa_gen.read_corpus(paths["train"])
    stray = sorted({s.scene_id for s in samples} - set(train_ids))
    if stray:
        raise ContaminationError(stray)
    vocab_words = qa_gen.vocabulary()
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.config.to_dict() != cfg.to_dict():
            raise CheckpointError("resume config differs from the checkpoint's config")
        params, opt, start = ck.params, ck.opt, ck.step
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        vocab_words = ck.vocab
    else:
        params = init_model(cfg, reasoner.Vocab(vocab_words))
        opt = OptimState(lr=cfg.lr, total_steps=cfg.steps, weight_decay=cfg.weight_decay)
        start = 0
        rng = np.random.default_rng([cfg.seed, 97])
    vocab = reasoner.Vocab(vocab_words)
    cache = RegionCache(scenes, cfg.art)
    pool = _pair_pool(scenes, train_ids)
    by_pair = _index_samples(samples)
    os.makedirs(out_dir, exist_ok=True)
    trace_path = os.path.join(out_dir, "trace.tsv")
    rows = []
    if resume is not None and os.path.exists(trace_path):
        with open(trace_path, encoding="utf-8") as fh:
            rows = [ln.rstrip("\n") for ln in fh.readlines()[1:] if int(ln.split("\t")[0]) < start]
    end = cfg.steps if stop_at is None else min(cfg.steps, stop_at)
    trace = []
    for step in range(start, end):
        idx = rng.choice(len(pool), size=min(cfg.batch, len(pool)), replace=False)
        retrieved = rng.random(len(idx)) < cfg.retrieved_fraction
        jobs = [pool[i] + ((cfg.mode if cfg.mode != "gt" else "greedy") if r else "true",)
                for i, r in zip(sorted(idx), retrieved)]
        lr = cosine_lr(cfg.lr, opt.t, opt.total_steps)
        total, comps, n = training_step(cfg, params, vocab, cache, jobs, by_pair, rng)
        tot = float(total.data)
        if not all(math.isfinite(x) for x in (tot,) + comps):
            raise TrainingError(f"non-finite loss at step {step}: total={tot} vqa={comps[0]} "
                                f"supcon={comps[1]} triplet={comps[2]}")
        if total.requires_grad:
            total.backward()
        adamw_step(params, opt)
        params.zero_grad()
        row = (step, tot) + comps + (lr, n)
        trace.append(row)
        rows.append(_trace_line(row))
        if step % 50 == 0:
            log.info("step %d total %.4f vqa %.4f supcon %.4f triplet %.4f", step, tot, *comps)
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write(TRACE_HEADER + "\n" + "".join(r + "\n" for r in rows))
    ckpt = Checkpoint(params, opt, cfg, end, rng.bit_generator.state, sorted(train_ids), vocab_words)
    save_checkpoint(ckpt, os.path.join(out_dir, "checkpoint"))
    return ckpt, trace


def read_trace(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()[1:]
    return [tuple(int(x) if i in (0, 6) else float(x) for i, x in enumerate(ln.split("\t"))) for ln in lines]


# --------------------------------------------------------------- evaluate


@dataclass
class EvalReport:
    mode: str
    per_task: dict  # task -> [correct, n]
    per_category: dict
    overall: float
    retrieval_top1: float
    retrieval_chance: float
    retrieval_n: int
    n_samples: int
    by_options: dict = field(default_factory=dict)  # "2"/"4" -> [correct, n]

    def accuracy(self, task):
        c, n = self.per_task[task]
        return c / n if n else float("nan")

    def to_record(self):
        return {"mode": self.mode, "overall": self.overall, "per_task": self.per_task,
                "per_category": self.per_category, "retrieval_top1": self.retrieval_top1,
                "retrieval_chance": self.retrieval_chance, "retrieval_n": self.retrieval_n,
                "n_samples": self.n_samples, "by_options": self.by_options}

    def table(self):
        lines = [f"mode {self.mode}", f"{'task':<16}{'n':>6}{'acc':>9}"]
        for t in qa_gen.TASKS:
            c, n = self.per_task.get(t, (0, 0))
            lines.append(f"{t:<16}{n:>6}{(100 * c / n if n else float('nan')):>8.1f}%")
        for cat, (c, n, _) in self.per_category.items():
            lines.append(f"{cat:<16}{n:>6}{(100 * c / n if n else float('nan')):>8.1f}%")
        lines.append(f"{'overall':<16}{self.n_samples:>6}{100 * self.overall:>8.1f}%")
        lines.append(f"{'retrieval top-1':<16}{self.retrieval_n:>6}{100 * self.retrieval_top1:>8.1f}%"
                     f"  (chance {100 * self.retrieval_chance:.1f}%)")
        return "\n".join(lines) + "\n"


def check_disjoint(eval_ids, train_ids):
    bad = set(eval_ids) & set(train_ids)
    if bad:
        raise ContaminationError(bad)


def _pairs_for(sample, views):
    a, b = sample.views
    if sample.task_id in VIEW_FREE:
        return [(a, x) for x in views if x != a]
    return [(a, b)]


def _report(mode, outcomes, ret):
    per_task, by_opt = {}, {}
    for task, n_opt, ok in outcomes:
        c = per_task.setdefault(task, [0, 0])
        c[0] += ok
        c[1] += 1
        o = by_opt.setdefault(str(n_opt), [0, 0])
        o[0] += ok
        o[1] += 1
    per_cat = {}
    for cat, tasks in qa_gen.CATEGORIES.items():
        c = sum(per_task.get(t, (0, 0))[0] for t in tasks)
        n = sum(per_task.get(t, (0, 0))[1] for t in tasks)
        per_cat[cat] = [c, n]
    n = len(outcomes)
    overall = sum(o[2] for o in outcomes) / n if n else float("nan")
    hits, chance, total = ret
    return EvalReport(mode, {t: per_task[t] for t in qa_gen.TASKS if t in per_task},
                      {k: [v[0], v[1], v[0] / v[1] if v[1] else float("nan")] for k, v in per_cat.items()},
                      overall, hits / total if total else float("nan"), chance / total if total else float("nan"),
                      total, n, by_opt)


def evaluate(checkpoint, data_dir, modes=("greedy",), corpus=None, predictor=None, out_dir=None):
    """Score the eval corpus once per matching mode.

    ``checkpoint`` is a Checkpoint or a directory. ``predictor(sample, scene)``
    replaces the model's answer when given (retrieval is still measured).
    """
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    cfg = ck.config
    paths = data_paths(data_dir)
    samples = qa_gen.read_corpus(corpus or paths["eval"])
    eval_ids = sorted({s.scene_id for s in samples})
    check_disjoint(eval_ids, ck.train_scenes)
    if os.path.exists(paths["split"]):
        check_disjoint(eval_ids, qa_gen.SplitManifest.load(paths["split"]).splits.get("train", []))
    scenes = load_bundle(paths["scenes"], eval_ids)
    missing = sorted(set(eval_ids) - set(scenes))
    if missing:
        raise ValueError(f"corpus references unknown scenes: {', '.join(missing)}")
    vocab = reasoner.Vocab(ck.vocab)
    cache = RegionCache(scenes, cfg.art)
    by_scene = {}
    for s in sorted(samples, key=lambda s: s.sample_id):
        by_scene.setdefault(s.scene_id, []).append(s)
    reports = {}
    ret = [0, 0.0, 0]
    for mi, mode in enumerate(modes):
        outcomes = []
        for sid in eval_ids:
            scene = scenes[sid]
            views = sorted(scene.projections)
            jobs = [(sid, a, b, mode) for i, a in enumerate(views) for b in views[i + 1:]
                    if scene.projections[a] and scene.projections[b]]
            out = run_pairs(cfg, ck.params, cache, jobs) if jobs else None
            if mi == 0 and out is not None:
                for pr in out.pairs:
                    _retrieval_hits(pr, ret)
            if predictor is None and out is not None:
                adapted = reasoner.adapt_regions(out.fused, out.fused_valid, ck.params)
            lookup = {(pr.a, pr.b): pr for pr in out.pairs} if out is not None else {}
            for s in by_scene[sid]:
                if predictor is not None:
                    pred = int(predictor(s, scene))
                else:
                    scores = []
                    for a, b in _pairs_for(s, views):
                        pr = lookup.get((min(a, b), max(a, b)))
                        if pr is not None:
                            scores.append(sample_log_scores(cfg, ck.params, vocab, out, pr, adapted, s))
                    pred = reasoner.distribution(reasoner.aggregate(scores)).predicted
                outcomes.append((s.task_id, len(s.options), int(pred == s.gold)))
        reports[mode] = _report(mode, outcomes, ret)
    if out_dir is not None:
        write_reports(reports, out_dir)
    return reports


def _retrieval_hits(pr, acc):
    """Top-1 over rows of a and rows of b that have a counterpart in the other view."""
    S = pr.S
    for M, src, dst in ((S, pr.tracks[pr.a], pr.tracks[pr.b]), (S.T, pr.tracks[pr.b], pr.tracks[pr.a])):
        for i, t in enumerate(src):
            if t in dst and M.shape[1]:
                acc[0] += int(dst[int(np.argmax(M[i]))] == t)
                acc[1] += 1.0 / M.shape[1]
                acc[2] += 1


def write_reports(reports, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(r.table() for r in reports.values()))
    with open(os.path.join(out_dir, "report.jsonl"), "w", encoding="utf-8") as fh:
        for r in reports.values():
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")


def oracle_predictor(sample, scene):
    """Re-derives the gold answer from scene ground truth (harness plumbing check)."""
    from .scene_synth import geometric_relations
    ctx = qa_gen._Pair(scene, geometric_relations(scene), *sample.views)
    return qa_gen.DERIVERS[sample.task_id](ctx, sample.question_refs(), sample.option_refs(), sample.options)


def untrained_checkpoint(cfg, train_scenes=()):
    vocab = qa_gen.vocabulary()
    ps = init_model(cfg, reasoner.Vocab(vocab))
    opt = OptimState(lr=cfg.lr, total_steps=cfg.steps, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 97])
    return Checkpoint(ps, opt, cfg, 0, rng.bit_generator.state, sorted(train_scenes), vocab)
