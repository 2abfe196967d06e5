"""Command-line surface. Every subcommand reads a JSON config, runs one
stage of the pipeline, and writes JSON/JSONL documents (tables also as
aligned plain text) under --out.

Exit codes: 0 success, 2 data error, 3 contract error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import adapters, corpus, harness, multitask
from .checkpoint import Checkpoint
from .errors import ContractError, DataError
from .explain import occlusion_importances, surrogate_importances, top_k_rationales
from .multitask import HeadConfig, LossWeights
from .training import TrainConfig


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"config file {path} is not valid JSON: {e}") from e


def _load_posts(cfg: dict, key: str, seed: int) -> list[corpus.TokenizedPost]:
    path = cfg.get(key)
    if not path:
        raise DataError(f"config is missing '{key}' (path to a JSONL corpus)")
    manifest = None
    mkey = cfg.get(f"{key}_manifest")
    if mkey:
        manifest = corpus.DatasetManifest.load(mkey)
    posts = corpus.load_jsonl(path, manifest)
    split_cfg = cfg.get(f"{key}_split") or cfg.get("split")
    if split_cfg and not any(p.split for p in posts):
        spec = corpus.SplitSpec(ratios=tuple(split_cfg.get("ratios", (0.7, 0.1, 0.2))),
                                stratified=split_cfg.get("stratified", True),
                                seed=split_cfg.get("seed", seed))
        posts = corpus.make_splits(posts, spec)
    return posts


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg.get("train", {}))


def _heads(cfg: dict, posts) -> HeadConfig:
    h = cfg.get("heads", {})
    classes = h.get("classes") or sorted({p.label for p in posts})
    targets = h.get("targets")
    if targets is None:
        targets = sorted({t for p in posts for t in p.targets})
    return HeadConfig(rationale=h.get("rationale", True), label=h.get("label", True),
                      target=h.get("target", bool(targets)), classes=classes,
                      targets=targets)


def cmd_gen_corpus(cfg: dict, seed: int, out: Path) -> None:
    specs = cfg.get("datasets") or [cfg]
    summary = []
    for raw in specs:
        raw = dict(raw)
        split_cfg = raw.pop("split", None)
        gen = corpus.GenConfig.from_dict(raw)
        posts, manifest = corpus.generate_synthetic(gen, seed)
        if split_cfg:
            spec = corpus.SplitSpec(ratios=tuple(split_cfg.get("ratios", (0.7, 0.1, 0.2))),
                                    stratified=split_cfg.get("stratified", True),
                                    seed=split_cfg.get("seed", seed))
            posts = corpus.make_splits(posts, spec)
        corpus.write_jsonl(posts, out / f"{gen.dataset_id}.jsonl")
        manifest.source = f"{gen.dataset_id}.jsonl"
        manifest.save(out / f"{gen.dataset_id}.manifest.json")
        summary.append({"dataset_id": gen.dataset_id, "n_posts": len(posts),
                        "counts": manifest.counts})
        print(f"wrote {out / (gen.dataset_id + '.jsonl')} ({len(posts)} posts)")
    harness.write_json({"seed": seed, "datasets": summary}, out / "gen_summary.json")


def cmd_train_rlt(cfg: dict, seed: int, out: Path) -> None:
    posts = _load_posts(cfg, "corpus", seed)
    heads = _heads(cfg, posts)
    w = cfg.get("weights", {})
    weights = LossWeights(beta=w.get("beta", 2.0), gamma=w.get("gamma", 10.0))
    ckpt, log = multitask.train_rlt(posts, heads, weights, _train_config(cfg), seed)
    path = ckpt.save(out / cfg.get("name", "extractor.ckpt"))
    harness.write_jsonl(log, out / "train_rlt_log.jsonl")
    dev = [p for p in posts if p.split == "dev"]
    report = {"checkpoint": path.name, "sha256": ckpt.sha256(), "epochs": len(log)}
    if heads.rationale:
        report["dev_rationale_macro_f1"] = multitask.rationale_macro_f1(ckpt, dev)
    if heads.label:
        report["dev_label_macro_f1"] = multitask.label_macro_f1(ckpt, dev)
    harness.write_json(report, out / "train_rlt_report.json")
    print(f"wrote {path}")


def _fewshot_subset(posts, cfg, seed):
    train = corpus.split_of(posts, "train")
    dev = corpus.split_of(posts, "dev")
    k = cfg.get("k")
    if k:
        train = corpus.sample_fewshot(train, int(k), n_sets=1, seed=seed)[0]
    return train, dev


def cmd_train_raft(cfg: dict, seed: int, out: Path) -> None:
    posts = _load_posts(cfg, "corpus", seed)
    train, dev = _fewshot_subset(posts, cfg, seed)
    classes = cfg.get("classes") or sorted({p.label for p in posts})
    raft = adapters.RaftConfig(
        variant=cfg.get("variant", "sa"), classes=classes,
        n_heads=cfg.get("n_heads", 4),
        gate_cls_override=cfg.get("gate_cls_override", True),
        extractor=cfg.get("extractor"), extractor_ref=cfg.get("extractor", ""),
    )
    ckpt, log = adapters.train_raft(train, dev, raft, _train_config(cfg), seed)
    path = ckpt.save(out / cfg.get("name", f"raft_{raft.variant}.ckpt"))
    harness.write_jsonl(log, out / f"train_raft_{raft.variant}_log.jsonl")
    print(f"wrote {path}")


def cmd_train_baseline(cfg: dict, seed: int, out: Path) -> None:
    posts = _load_posts(cfg, "corpus", seed)
    train, dev = _fewshot_subset(posts, cfg, seed)
    classes = cfg.get("classes") or sorted({p.label for p in posts})
    ckpt, log = adapters.baseline_l(train, dev, classes, _train_config(cfg), seed)
    path = ckpt.save(out / cfg.get("name", "baseline.ckpt"))
    harness.write_jsonl(log, out / "train_baseline_log.jsonl")
    print(f"wrote {path}")


def cmd_fewshot(cfg: dict, seed: int, out: Path) -> None:
    target = _load_posts(cfg, "target", seed)
    source = _load_posts(cfg, "source", seed) if cfg.get("source") else None
    plan_cfg = cfg.get("plan", {})
    plan = harness.FewShotPlan(
        k_values=tuple(plan_cfg.get("k_values", (50, 100, 150, 200))),
        n_sets=plan_cfg.get("n_sets", 5),
        variants=tuple(plan_cfg.get("variants", ("baseline", "raft_sa", "raft_ca"))),
        seed=plan_cfg.get("seed", seed),
        train=TrainConfig.from_dict(plan_cfg.get("train", {"lr": 1e-5})),
    )
    extractor = Checkpoint.load(cfg["extractor"]) if cfg.get("extractor") else None
    report, _ = harness.run_fewshot_experiment(plan, target, extractor=extractor, source=source)
    harness.write_json(report, out / "fewshot_report.json")
    text = harness.render_table(report["rows"], ["variant", "dataset", "k", "mean", "set_scores"])
    (out / "fewshot_report.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_ablate(cfg: dict, seed: int, out: Path) -> None:
    posts = _load_posts(cfg, "target", seed)
    test = corpus.split_of(posts, "test") or posts
    extractor = Checkpoint.load(cfg["extractor"])
    models = {name: adapters.model_from_checkpoint(Checkpoint.load(path))
              for name, path in sorted(cfg.get("models", {}).items())}
    if not models:
        raise DataError("ablate config needs a 'models' map of gated checkpoints")
    ab_cfg = cfg.get("ablation", {})
    config = harness.AblationConfig(
        quartile=ab_cfg.get("quartile", 0.75),
        suppress_value=ab_cfg.get("suppress_value", -4.0),
        random_low=ab_cfg.get("random_low", -5.0),
        random_high=ab_cfg.get("random_high", 5.0),
        seed=ab_cfg.get("seed", seed),
    )
    result = harness.run_ablation_experiment(models, test, extractor, config)
    harness.write_json(result, out / "ablation.json")
    text = harness.render_table(result["rows"],
                                ["variant", "dataset", "baseline_f1", "perturbed_f1", "pct_change"])
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_explain(cfg: dict, seed: int, out: Path) -> None:
    posts = _load_posts(cfg, "corpus", seed)
    model = adapters.model_from_checkpoint(Checkpoint.load(cfg["model"]))
    predictor = adapters.make_predictor(model)
    methods = cfg.get("methods", ["surrogate", "occlusion"])
    limit = cfg.get("limit")
    k = cfg.get("k", 5)
    records = []
    import numpy as np
    for i, post in enumerate(posts[:limit] if limit else posts):
        probs = predictor(post.tokens)
        j = int(np.argmax(probs))
        for method in methods:
            if method == "surrogate":
                iv = surrogate_importances(predictor, post.tokens, j,
                                           n_samples=max(cfg.get("n_samples", 200), 2 * len(post.tokens)),
                                           seed=seed * 7919 + i)
            elif method == "occlusion":
                iv = occlusion_importances(predictor, post.tokens, j)
            else:
                raise DataError(f"unknown explanation method '{method}'")
            records.append({"post_id": post.id, "method": method,
                            "scores": [float(s) for s in iv.scores],
                            "top_k": top_k_rationales(iv.scores, k)})
    harness.write_jsonl(records, out / "explanations.jsonl")
    print(f"wrote {out / 'explanations.jsonl'} ({len(records)} records)")


def cmd_eval_explain(cfg: dict, seed: int, out: Path) -> None:
    posts = _load_posts(cfg, "corpus", seed)
    subset = cfg.get("use_split")
    if subset:
        posts = corpus.split_of(posts, subset)
    models = {name: adapters.model_from_checkpoint(Checkpoint.load(path))
              for name, path in sorted(cfg.get("models", {}).items())}
    if not models:
        raise DataError("eval-explain config needs a 'models' map of checkpoints")
    result = harness.explainability_evaluation(models, posts, k=cfg.get("k", 5),
                                               n_samples=cfg.get("n_samples", 200), seed=seed)
    harness.write_json(result, out / "explain_eval.json")
    text = harness.render_table(result["rows"],
                                ["model", "method", "auprc", "token_f1", "iou_f1",
                                 "comprehensiveness", "sufficiency", "n_posts"])
    (out / "explain_eval.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_simdomains(cfg: dict, seed: int, out: Path) -> None:
    paths = cfg.get("datasets")
    if not paths or len(paths) < 2:
        raise DataError("simdomains needs a 'datasets' map with at least two corpora")
    loaded = {ds: corpus.load_jsonl(p) for ds, p in sorted(paths.items())}
    dists = {ds: corpus.term_distribution(posts) for ds, posts in loaded.items()}
    ids = sorted(dists)
    pairs = []
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            pairs.append({"a": a, "b": b,
                          "cosine": corpus.cosine_similarity(dists[a], dists[b])})
    best_sources = {}
    for target in ids:
        candidates = {ds: loaded[ds] for ds in ids if ds != target}
        sel = harness.select_best_source(loaded[target], candidates, mode="best-single")
        best_sources[target] = {"best_single": sel["selected"][0],
                                "similarities": sel["similarities"],
                                "pool_all": sorted(candidates)}
    result = {"pairwise": pairs, "best_sources": best_sources}
    harness.write_json(result, out / "simdomains.json")
    text = harness.render_table(pairs, ["a", "b", "cosine"])
    (out / "simdomains.txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_sweep(cfg: dict, seed: int, out: Path) -> None:
    posts = _load_posts(cfg, "corpus", seed)
    heads = _heads(cfg, posts)
    spec_cfg = cfg.get("spec", {})
    spec = harness.SweepSpec(
        learning_rates=tuple(spec_cfg.get("learning_rates", (1e-5, 3e-5, 5e-5))),
        betas=tuple(spec_cfg.get("betas", (1, 2, 5, 10, 100))),
        gammas=tuple(spec_cfg.get("gammas", (1, 2, 5, 10, 100))),
    )
    result = harness.sweep(spec, posts, heads, _train_config(cfg), seed)
    harness.write_json(result, out / "sweep.json")
    text = harness.render_table(result["grid"], ["lr", "beta", "gamma", "dev_metric"])
    (out / "sweep.txt").write_text(text, encoding="utf-8")
    print(text, end="")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-rlt": cmd_train_rlt,
    "train-raft": cmd_train_raft,
    "train-baseline": cmd_train_baseline,
    "fewshot": cmd_fewshot,
    "ablate": cmd_ablate,
    "explain": cmd_explain,
    "eval-explain": cmd_eval_explain,
    "simdomains": cmd_simdomains,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raftlab",
                                     description="rationale-gated few-shot classification lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=str, default="out")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = _load_config(args.config)
        COMMANDS[args.command](cfg, args.seed, out)
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except ContractError as e:
        print(f"contract error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
