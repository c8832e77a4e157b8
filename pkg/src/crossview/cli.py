"""Command line entry point: gen, train, eval, match, inspect."""
import argparse
import logging
import os
import sys

import numpy as np

from . import harness, qa_gen, reasoner, retrieval
from .errors import CheckpointError, ConfigError, ContaminationError


def _config(args, data_dir=None):
    cfg = harness.TrainConfig()
    base = args.config
    if base is None and data_dir and os.path.exists(harness.data_paths(data_dir)["config"]):
        base = harness.data_paths(data_dir)["config"]
    if base:
        cfg = harness.load_config(base, cfg)
    harness.apply_overrides(cfg, [kv.split("=", 1) for kv in args.set or []])
    return cfg


def cmd_gen(args):
    cfg = _config(args)
    if args.seed is not None:
        cfg.data_seed = args.seed
    m = harness.generate_data(cfg, args.out)
    n_train = len(qa_gen.read_corpus(harness.data_paths(args.out)["train"]))
    n_eval = len(qa_gen.read_corpus(harness.data_paths(args.out)["eval"]))
    print(f"scenes train={len(m.splits['train'])} eval={len(m.splits['eval'])}  samples train={n_train} eval={n_eval}")


def cmd_train(args):
    cfg = _config(args, args.data)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode is not None:
        cfg.mode = args.mode
    if args.steps is not None:
        cfg.steps = args.steps
    ck, trace = harness.train(cfg, args.data, args.out, resume=args.resume)
    last = trace[-1] if trace else None
    if last:
        print(f"step {last[0]} total {last[1]:.4f} vqa {last[2]:.4f} supcon {last[3]:.4f} triplet {last[4]:.4f}")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint')}")


def cmd_eval(args):
    modes = retrieval.MODES if args.mode == ["all"] else tuple(args.mode or ["greedy"])
    reports = harness.evaluate(args.checkpoint, args.data, modes, corpus=args.corpus, out_dir=args.out)
    for r in reports.values():
        print(r.table())


def _load_scene(data, scene_id):
    scenes = harness.load_bundle(harness.data_paths(data)["scenes"], [scene_id])
    if scene_id not in scenes:
        raise SystemExit(f"unknown scene {scene_id}")
    return scenes


def cmd_match(args):
    scenes = _load_scene(args.data, args.scene)
    ck = harness.load_checkpoint(args.checkpoint)
    a, b = sorted(args.views)
    cache = harness.RegionCache(scenes, ck.config.art)
    out = harness.run_pairs(ck.config, ck.params, cache, [(args.scene, a, b, args.mode or "greedy")])
    pr = out.pairs[0]
    ta, tb = pr.tracks[a], pr.tracks[b]
    print(f"similarity, rows = view {a} tracks {ta}, cols = view {b} tracks {tb}")
    with np.printoptions(precision=3, suppress=True):
        print(pr.S)
    for i, j in enumerate(pr.pi):
        got = tb[j] if j >= 0 else None
        mark = "ok" if got == ta[i] else ("-" if ta[i] not in tb and got is None else "wrong")
        print(f"  track {ta[i]} -> {got}  {mark}")


def cmd_inspect(args):
    samples = {s.sample_id: s for s in qa_gen.read_corpus(args.corpus or harness.data_paths(args.data)["eval"])}
    if args.sample not in samples:
        raise SystemExit(f"unknown sample {args.sample}")
    s = samples[args.sample]
    scenes = _load_scene(args.data, s.scene_id)
    ck = harness.load_checkpoint(args.checkpoint)
    vocab = reasoner.Vocab(ck.vocab)
    a, b = sorted(s.views)
    cache = harness.RegionCache(scenes, ck.config.art)
    out = harness.run_pairs(ck.config, ck.params, cache, [(s.scene_id, a, b, args.mode or "greedy")])
    pr = out.pairs[0]
    adapted = reasoner.adapt_regions(out.fused, out.fused_valid, ck.params)
    rows = harness._refs_in_pair(pr, s)
    n_q = s.n_question_refs()
    emb = [adapted[r] for r in rows[:n_q]]
    g, o = harness.Tensor(np.zeros((1, ck.config.d_r))), harness.Tensor(np.zeros((1, ck.config.d_r)))
    inp = reasoner.assemble_input(s.question, emb, g, o, vocab, ck.params)
    print(f"{s.sample_id}  [{s.task_id}]  {s.question}")
    print(f"sequence length {inp.sequence.shape[0]}; positions 0,1 = scene and target cues")
    for r in range(n_q):
        pos = [p for p, k in inp.slot_map if k == r]
        print(f"  region {r} {tuple(s.region_refs[r])}: positions {pos[0]}..{pos[-1]}")
    dist = reasoner.distribution(harness.sample_log_scores(ck.config, ck.params, vocab, out, pr, adapted, s))
    for k, (opt, refs) in enumerate(zip(s.options, s.option_refs())):
        tag = " gold" if k == s.gold else ""
        print(f"  option {k}: {opt} {refs if refs else ''} p={dist.probs[k]:.4f}{tag}")


def build_parser():
    ap = argparse.ArgumentParser(prog="crossview", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
        if data:
            p.add_argument("--data", required=True, help="directory written by gen")

    p = sub.add_parser("gen", help="generate scenes, split and QA corpora")
    common(p, data=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train and write a checkpoint plus loss trace")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=retrieval.MODES)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--mode", action="append", choices=retrieval.MODES + ("all",))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("match", help="print the similarity matrix and mapping for one view pair")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--views", type=int, nargs=2, default=(0, 1))
    p.add_argument("--mode", choices=retrieval.MODES)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("inspect", help="show the slot map and option probabilities of one sample")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--corpus")
    p.add_argument("--mode", choices=retrieval.MODES)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ConfigError, CheckpointError, ContaminationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
