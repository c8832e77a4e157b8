"""Acceptance criteria, one test each. Every test records a PASS/FAIL line.

The training criteria share one desk-scale run: 200 training scenes and 60
evaluation scenes at the default encoder noise, trained once with the full
objective and once without the contrastive term.
"""
import itertools
import math
import os
import time

import numpy as np
import pytest

from crossview import art, harness, kernels, numcore as nc, ocva, qa_gen, reasoner, retrieval
from crossview.numcore import ParamSet, Tensor
from crossview.scene_synth import FeatureMap
from conftest import ACCEPTANCE


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------- gradients


def _mlp(rng):
    ps = ParamSet()
    nc.add_mlp(ps, "m", 4, 6, 3, rng)
    x = ps.add("x", rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 3))
    return ps, lambda: nc.sum_(nc.mlp_forward(x, ps.scope("m")) * w)


def _mha(rng):
    ps = ParamSet()
    nc.add_mha(ps, "a", 4, rng)
    q, kv = ps.add("q", rng.normal(size=(3, 4))), ps.add("kv", rng.normal(size=(5, 4)))
    valid = rng.random(5) < 0.7
    valid[0] = True
    w = rng.normal(size=(3, 4))
    return ps, lambda: nc.sum_(nc.mha_forward(q, kv, kv, ps.scope("a"), 2, valid) * w)


def _ln(rng):
    ps = ParamSet()
    x, g, b = ps.add("x", rng.normal(size=(4, 6))), ps.add("g", rng.normal(size=6)), ps.add("b", rng.normal(size=6))
    w = rng.normal(size=(4, 6))
    return ps, lambda: nc.sum_(nc.layer_norm(x, g, b) * w)


def _g_head(rng):
    ps = ParamSet()
    retrieval.init_params(ps, 5, 4, 6, rng)
    x = ps.add("x", rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 4))
    return ps, lambda: nc.sum_(retrieval.embed_batch(x, ps) * w)


def _fuse(rng):
    cfg = ocva.OcvaConfig(heads=2, depth=2, ffn_mult=2)
    ps = ParamSet()
    ocva.init_params(ps, 4, cfg, rng)
    src, tgt = ps.add("src", rng.normal(size=(2, 3, 4))), ps.add("tgt", rng.normal(size=(2, 3, 4)))
    sv = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
    tv = np.array([[1, 0, 1], [0, 0, 0]], dtype=bool)
    w = rng.normal(size=(2, 3, 4))
    return ps, lambda: nc.sum_(ocva.fuse_batch(src, sv, tgt, tv, cfg, ps) * w)


def _supcon(rng):
    ps = ParamSet()
    x = ps.add("x", rng.normal(size=(6, 4)))
    return ps, lambda: ocva.supcon_loss(nc.l2_normalize(x), [1, 1, 2, 2, 3, 4], 0.5)[0]


def _triplet(rng):
    ps = ParamSet()
    a, b = ps.add("a", rng.normal(size=(3, 4))), ps.add("b", rng.normal(size=(4, 4)))
    return ps, lambda: ocva.triplet_loss(nc.l2_normalize(a), nc.l2_normalize(b), [(0, 1), (1, 0), (2, 3)], 1.5)


def _adapter(rng):
    ps = ParamSet()
    reasoner.init_params(ps, 6, 4, 5, 5, rng)
    x = rng.normal(size=(3, 6))
    valid = np.array([True, False, True])
    w = rng.normal(size=(3, 4))
    return ps, lambda: nc.sum_(reasoner.adapt_regions(x, valid, ps) * w)


def _scorer(rng):
    vocab = reasoner.Vocab(["which", "object", "no", "red"])
    ps = ParamSet()
    reasoner.init_params(ps, 6, 4, len(vocab), 5, rng)
    aligned = Tensor(rng.normal(size=(2, 3, 6)))
    valid = np.ones((2, 3), dtype=bool)

    def loss():
        adapted = reasoner.adapt_regions(aligned, valid, ps)
        g, o = reasoner.scene_and_target_cues(aligned, valid, nc.take(aligned, 0), valid[0], ps)
        inp = reasoner.assemble_input("which object <region> ?", [nc.take(adapted, 0)], g, o, vocab, ps)
        opts = nc.stack([reasoner.option_embedding("<region>", [nc.take(adapted, 1)], vocab, ps),
                         reasoner.option_embedding("no", [], vocab, ps)])
        return reasoner.vqa_loss(reasoner.option_log_scores(inp.sequence, opts, ps), 1)

    return ps, loss


GRAD_OPS = {"mlp": _mlp, "mha": _mha, "layer_norm": _ln, "g_head": _g_head, "fuse": _fuse, "supcon": _supcon,
            "triplet": _triplet, "adapter": _adapter, "scorer": _scorer}


def test_gradient_integrity():
    t0 = time.process_time()
    worst = {}
    for name, build in GRAD_OPS.items():
        errs = []
        for seed in range(20):
            ps, fn = build(np.random.default_rng([seed, 17]))
            errs.append(nc.grad_check(fn, ps))
        worst[name] = max(errs)
    cpu = time.process_time() - t0
    top = max(worst.values())
    record("gradient integrity", top <= 1e-4 and cpu <= 120,
           f"max rel err {top:.2e} over 9 ops x 20 seeds (worst {max(worst, key=worst.get)}), {cpu:.1f}s CPU")


# ------------------------------------------------------------ assignment


def test_assignment_optimality():
    rng = np.random.default_rng(2024)
    exact = greedy_ok = 0
    for _ in range(200):
        n = int(rng.integers(1, 8))
        S = rng.uniform(-1, 1, size=(n, n))
        best = max(S[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n)))
        h = retrieval.match(S, "hungarian").pi
        g = retrieval.match(S, "greedy").pi
        exact += S[np.arange(n), h].sum() == best
        greedy_ok += S[np.arange(n), g].sum() <= S[np.arange(n), h].sum()
    record("assignment optimality", exact == 200 and greedy_ok == 200,
           f"hungarian == brute force on {exact}/200, greedy <= hungarian on {greedy_ok}/200")


# ----------------------------------------------------------- closed form


def test_closed_form_losses():
    gaps = []
    z = Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    gaps.append(abs(ocva.supcon_loss(z, [1, 1, 2], 0.07)[0].item() - math.log1p(math.exp(-1 / 0.07))))
    gaps.append(abs(ocva.supcon_loss(Tensor(np.array([[0.6, 0.8], [0.6, 0.8]])), [1, 1])[0].item()))
    za = Tensor(np.array([[1.0, 0.0]]))
    gaps.append(abs(ocva.triplet_loss(za, Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])), [(0, 0)]).item()))
    gaps.append(abs(ocva.triplet_loss(za, Tensor(np.array([[1.0, -1.2], [1.0, 1.0]])), [(0, 0)]).item() - 0.7))
    metric_ok = max(gaps) <= 1e-6
    vqa = []
    for n in (4, 2):
        vqa.append(abs(reasoner.vqa_loss(Tensor(np.zeros(n)), 0).item() - math.log(n)))
    record("closed-form loss values", metric_ok and max(vqa) <= 1e-9,
           f"supcon/triplet max gap {max(gaps):.1e}, uniform VQA gap to ln4/ln2 {max(vqa):.1e}")


# -------------------------------------------------------------- geometry


def _random_mask(rng, lo, hi):
    while True:
        c = rng.uniform(0, 168, size=2)
        r = np.exp(rng.uniform(np.log(6), np.log(70)))
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=int(rng.integers(3, 9))))
        pts = np.stack([c[0] + r * np.cos(ang), c[1] + rng.uniform(0.4, 1.0) * r * np.sin(ang)], axis=1)
        m = kernels.rasterize_convex(kernels.convex_hull(pts), 168, 168)
        if lo <= m.sum() <= hi:
            return m


def test_region_geometry():
    cfg = art.ArtConfig()
    K, P = cfg.K, cfg.P
    rng = np.random.default_rng(5)
    fmap = FeatureMap(0, np.zeros((12, 12, 4)), 14)
    counts = [art.prepare_region(fmap, _random_mask(rng, P * P, 8 * K * P * P), cfg, capped=False).features.shape[0]
              for _ in range(500)]
    inside = sum(K / 2 <= c <= 8 * K for c in counts)
    g = art.geometry_from_box((0, 0, 21, 35), 490, art.ArtConfig(pad=0))
    fixtures = [(g.s, g.h_r, g.w_r) == (2, 42, 70), art.scale_factor(K * P * P, K, P, cfg.s_max) == 1,
                art.scale_factor(20, K, P, cfg.s_max) == 8 and art.scale_factor(20, K, P) == 10]
    record("region geometry", inside == 500 and all(fixtures),
           f"kept cells in [{K // 2}, {8 * K}] for {inside}/500 masks (range {min(counts)}..{max(counts)}), "
           f"worked fixtures {sum(fixtures)}/3")


# ---------------------------------------------------------- desk-scale run


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    data = str(root / "data")
    cfg = harness.TrainConfig()
    t0 = time.process_time()
    harness.generate_data(cfg, data)
    gen_cpu = time.process_time() - t0
    untrained = harness.evaluate(harness.untrained_checkpoint(cfg), data)["greedy"]
    runs = {}
    for name, kw in (("full", {}), ("no_supcon", {"lambda_sc": 0.0})):
        t0 = time.process_time()
        ck, _ = harness.train(harness.TrainConfig(**kw), data, str(root / name))
        train_cpu = time.process_time() - t0
        reports = harness.evaluate(ck, data, modes=("greedy", "hungarian", "gt"))
        runs[name] = (reports, train_cpu)
    return {"data": data, "gen_cpu": gen_cpu, "untrained": untrained, "runs": runs, "cfg": cfg}


def test_training_effect(desk_run):
    u = desk_run["untrained"]
    full, train_cpu = desk_run["runs"]["full"]
    t = full["greedy"]
    cpu = desk_run["gen_cpu"] + train_cpu
    gain = t.retrieval_top1 - u.retrieval_top1
    ok = gain >= 0.25 and t.retrieval_top1 > 2 * t.retrieval_chance and cpu <= 600
    record("training effect", ok,
           f"retrieval top-1 {100 * u.retrieval_top1:.1f}% -> {100 * t.retrieval_top1:.1f}% (+{100 * gain:.1f} pts), "
           f"chance {100 * t.retrieval_chance:.1f}%, gen+train {cpu:.0f}s CPU")


def test_ablation_direction(desk_run):
    full = desk_run["runs"]["full"][0]["greedy"].per_category["Correspondence"][2]
    ablated = desk_run["runs"]["no_supcon"][0]["greedy"].per_category["Correspondence"][2]
    record("ablation direction", full - ablated >= 0.10,
           f"correspondence accuracy {100 * full:.1f}% full vs {100 * ablated:.1f}% without SupCon "
           f"(drop {100 * (full - ablated):.1f} pts, need >= 10)")


def test_matching_mode_parity(desk_run):
    r = desk_run["runs"]["full"][0]
    g, h, gt = r["greedy"].overall, r["hungarian"].overall, r["gt"].overall
    record("matching-mode parity", abs(g - h) <= 0.03 and gt <= g,
           f"overall greedy {100 * g:.1f}%, hungarian {100 * h:.1f}%, gt ordering {100 * gt:.1f}%")


def test_taxonomy_coverage(desk_run):
    data = desk_run["data"]
    u = desk_run["untrained"]
    trained = desk_run["runs"]["full"][0]["greedy"]
    corpus = qa_gen.read_corpus(os.path.join(data, "eval.jsonl"))
    scenes = harness.load_bundle(harness.data_paths(data)["scenes"], {s.scene_id for s in corpus})
    valid = all(not qa_gen.validate_sample(s, scenes[s.scene_id]) for s in corpus)
    covered = [t for t in qa_gen.TASKS if trained.per_task.get(t, (0, 0))[1] > 0]
    manifest = qa_gen.SplitManifest.load(harness.data_paths(data)["split"])
    disjoint = not set(manifest.splits["train"]) & set(manifest.splits["eval"])
    c4, n4 = u.by_options.get("4", (0, 0))
    c2, n2 = u.by_options.get("2", (0, 0))
    a4, a2 = c4 / max(n4, 1), c2 / max(n2, 1)
    chance = abs(a4 - 0.25) <= 0.05 and abs(a2 - 0.5) <= 0.05 and min(n4, n2) >= 400
    record("taxonomy coverage", valid and len(covered) == 17 and disjoint and chance,
           f"{len(covered)}/17 tasks evaluated, corpus valid={valid}, split disjoint={disjoint}, untrained "
           f"4-option {100 * a4:.1f}% (n={n4}), binary {100 * a2:.1f}% (n={n2})")


def _tree_bytes(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def test_determinism(tmp_path):
    cfg_kw = dict(n_train_scenes=12, n_eval_scenes=6, steps=20)
    trees = []
    for k in range(2):
        root = tmp_path / f"run{k}"
        cfg = harness.TrainConfig(**cfg_kw)
        harness.generate_data(cfg, str(root / "data"))
        ck, _ = harness.train(harness.TrainConfig(**cfg_kw), str(root / "data"), str(root / "train"))
        harness.evaluate(os.path.join(root, "train", "checkpoint"), str(root / "data"),
                         modes=("greedy", "hungarian", "gt"), out_dir=str(root / "report"))
        trees.append(_tree_bytes(root))
    same = trees[0].keys() == trees[1].keys() and all(trees[0][k] == trees[1][k] for k in trees[0])
    record("determinism", same, f"{len(trees[0])} files from gen, train and eval compared byte for byte")
