"""Experiment orchestration: few-shot protocol, source selection, ablation,
hyperparameter sweep, and explanation evaluation.

Everything here is deterministic given the plan seed: per-cell training
seeds are derived arithmetically from (seed, k, set index, variant), and all
report structures serialize to byte-identical JSON on reruns.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import (ClassifierModel, RaftConfig, baseline_l, compute_gates,
                       eval_macro_f1, make_predictor, model_from_checkpoint,
                       train_classifier)
from .checkpoint import Checkpoint
from .corpus import TokenizedPost, sample_fewshot, split_of, term_distribution, cosine_similarity
from .encoder import Vocabulary
from .errors import ContractError, DataError
from .explain import minmax_normalize, occlusion_importances, surrogate_importances, top_k_rationales
from .metrics import (FaithfulnessInput, auprc, comprehensiveness, iou_f1,
                      mask_to_spans, sufficiency, token_f1)
from .multitask import (HeadConfig, LossWeights, RltModel,
                        model_from_checkpoint as rlt_from_checkpoint,
                        predict_rationale_scores, train_rlt)
from .training import TrainConfig

VARIANT_ORDER = ("baseline", "baseline_dom", "raft_sa", "raft_ca")


@dataclass
class FewShotPlan:
    """Grid of (variant, k, set) cells, all evaluated on one fixed test split."""

    k_values: tuple[int, ...] = (50, 100, 150, 200)
    n_sets: int = 5
    variants: tuple[str, ...] = ("baseline", "raft_sa", "raft_ca")
    seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-5))

    def __post_init__(self):
        bad = [v for v in self.variants if v not in VARIANT_ORDER]
        if bad:
            raise ContractError(f"unknown variants {bad}")

    def to_dict(self) -> dict:
        return {
            "k_values": list(self.k_values),
            "n_sets": self.n_sets,
            "variants": list(self.variants),
            "seed": self.seed,
            "train": dataclasses.asdict(self.train),
        }


@dataclass
class AblationConfig:
    """Random-gate perturbation: suppress the top-quartile logits, randomize
    the rest, softmax over the token axis."""

    quartile: float = 0.75
    suppress_value: float = -4.0
    random_low: float = -5.0
    random_high: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.quartile < 1.0:
            raise ContractError("quartile must lie in (0, 1)")
        if self.random_low >= self.random_high:
            raise ContractError("random range is empty")


@dataclass
class SweepSpec:
    learning_rates: tuple[float, ...] = (1e-5, 3e-5, 5e-5)
    betas: tuple[float, ...] = (1, 2, 5, 10, 100)
    gammas: tuple[float, ...] = (1, 2, 5, 10, 100)


def _cell_seed(seed: int, k: int, set_idx: int, variant: str) -> int:
    return (seed * 1_000_003 + k * 1_009 + set_idx * 101 + VARIANT_ORDER.index(variant)) % (2**62)


# -- source selection --


def select_best_source(target: list[TokenizedPost], candidates: dict[str, list[TokenizedPost]],
                       mode: str = "best-single") -> dict:
    """Pick a source corpus for domain pretraining.

    best-single: argmax term-distribution cosine similarity against the
    target (ties to the lexicographically smaller dataset id). pool-all:
    concatenate every candidate. Returns a dict with the similarity table,
    the selected id(s), and the selected posts.
    """
    if not candidates:
        raise DataError("no candidate source datasets")
    if mode not in ("best-single", "pool-all"):
        raise ContractError(f"unknown mode '{mode}'")
    tdist = term_distribution(target)
    sims = {ds: cosine_similarity(tdist, term_distribution(posts))
            for ds, posts in sorted(candidates.items())}
    if mode == "best-single":
        # ties resolve toward the lexicographically smaller id
        best = None
        for ds in sorted(sims):
            if best is None or sims[ds] > sims[best]:
                best = ds
        posts = candidates[best]
        selected = [best]
    else:
        posts = [p for ds in sorted(candidates) for p in candidates[ds]]
        selected = sorted(candidates)
    return {"mode": mode, "selected": selected, "similarities": sims, "posts": posts}


# -- domain pretraining --


def pretrain_then_fewshot(source: list[TokenizedPost], fewshot: list[TokenizedPost],
                          target_dev: list[TokenizedPost], target_test: list[TokenizedPost],
                          classes: list[str], config: TrainConfig, seed: int,
                          source_classes: list[str] | None = None) -> tuple[ClassifierModel, float]:
    """Train on the full source, swap in a fresh head, fine-tune on the shots.

    The tokenizer vocabulary is built from source train plus the few-shot
    set. With an empty few-shot set the pretrained encoder is evaluated
    zero-shot under the fresh random head.
    """
    src_train = split_of(source, "train") or source
    src_dev = split_of(source, "dev")
    if source_classes is None:
        source_classes = sorted({p.label for p in source})
    vocab = Vocabulary.build([p.tokens for p in src_train] + [p.tokens for p in fewshot],
                             max_size=config.max_vocab)
    pre_ckpt, _ = baseline_l(src_train, src_dev or src_train[:1], source_classes,
                             config, seed, vocab=vocab)
    encoder_params = {k: v for k, v in pre_ckpt.params.items() if not k.startswith("cls.")}
    if fewshot:
        ckpt, _ = baseline_l(fewshot, target_dev, classes, config,
                             seed + 1, init_params=encoder_params, vocab=vocab)
        model = model_from_checkpoint(ckpt)
    else:
        # zero-shot: fresh random head over the pretrained encoder
        stub, _ = baseline_l(src_train[:1], src_train[:1], classes,
                             dataclasses.replace(config, max_epochs=0, patience=1),
                             seed + 1, init_params=encoder_params, vocab=vocab)
        model = model_from_checkpoint(stub)
    score = eval_macro_f1(model, target_test)
    return model, score


# -- few-shot experiment --


def run_fewshot_experiment(plan: FewShotPlan, target: list[TokenizedPost],
                           extractor: Checkpoint | None = None,
                           source: list[TokenizedPost] | None = None,
                           dataset_id: str = "", keep_models: bool = False) -> tuple[dict, dict]:
    """Evaluate every (variant, k, set) cell on the fixed target test split.

    Returns (report, artifacts); the report is a JSON-serializable table,
    artifacts optionally carries the trained models keyed (variant, k, set).
    """
    train_pool = split_of(target, "train")
    dev = split_of(target, "dev")
    test = split_of(target, "test")
    if not train_pool or not dev or not test:
        raise DataError("target corpus must carry train/dev/test split tags")
    needs_extractor = any(v.startswith("raft_") for v in plan.variants)
    if needs_extractor and extractor is None:
        raise DataError("plan includes gated variants but no extractor checkpoint was given")
    if "baseline_dom" in plan.variants and source is None:
        raise DataError("plan includes baseline_dom but no source corpus was given")
    classes = sorted({p.label for p in target})
    dataset_id = dataset_id or (target[0].dataset_id if target else "")
    test_ids = {p.id for p in test}

    extractor_model = rlt_from_checkpoint(extractor) if extractor is not None else None
    gate_cache: dict[str, np.ndarray] = {}

    def gates_for(posts: list[TokenizedPost]) -> dict[str, np.ndarray]:
        for p in posts:
            if p.id not in gate_cache:
                gate_cache[p.id] = compute_gates(extractor_model, p.tokens)
        return gate_cache

    rows: list[dict] = []
    artifacts: dict = {"models": {}, "fewshot_sets": {}}
    for k in plan.k_values:
        shot_sets = sample_fewshot(train_pool, k, n_sets=plan.n_sets,
                                   seed=plan.seed * 100_003 + k)
        artifacts["fewshot_sets"][k] = shot_sets
        for set_idx, shots in enumerate(shot_sets):
            overlap = {p.id for p in shots} & test_ids
            if overlap:
                raise ContractError(f"few-shot set leaks into the test split: {sorted(overlap)[:3]}")
        for variant in plan.variants:
            set_scores = []
            for set_idx, shots in enumerate(shot_sets):
                cell_seed = _cell_seed(plan.seed, k, set_idx, variant)
                if variant == "baseline":
                    ckpt, _ = baseline_l(shots, dev, classes, plan.train, cell_seed)
                    model = model_from_checkpoint(ckpt)
                    score = eval_macro_f1(model, test)
                elif variant == "baseline_dom":
                    model, score = pretrain_then_fewshot(source, shots, dev, test,
                                                         classes, plan.train, cell_seed)
                else:
                    raft = RaftConfig(variant=variant.removeprefix("raft_"),
                                      classes=classes, extractor=extractor)
                    ckpt, _ = train_classifier(shots, dev, variant, classes,
                                               plan.train, cell_seed, raft=raft)
                    model = model_from_checkpoint(ckpt)
                    score = eval_macro_f1(model, test, gates_map=gates_for(test))
                set_scores.append(float(score))
                if keep_models:
                    artifacts["models"][(variant, k, set_idx)] = model
            rows.append({
                "variant": variant,
                "dataset": dataset_id,
                "k": k,
                "set_scores": set_scores,
                "mean": float(np.mean(set_scores)),
            })
    report = {"plan": plan.to_dict(), "dataset": dataset_id, "rows": rows}
    return report, artifacts


# -- random-gate ablation --


@dataclass
class AblationResult:
    gates: dict[str, np.ndarray]
    suppressed: dict[str, np.ndarray]
    threshold: float


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Classic nearest-rank percentile: value at rank ceil(q*N), 1-indexed."""
    a = np.sort(np.asarray(values, dtype=np.float64))
    if a.size == 0:
        raise DataError("percentile of an empty sample")
    rank = max(1, math.ceil(q * a.size))
    return float(a[rank - 1])


def random_rationale_ablation(extractor: Checkpoint | RltModel, posts: list[TokenizedPost],
                              config: AblationConfig) -> AblationResult:
    """Destroy the informative gates for a corpus.

    The dataset-level 75th-percentile raw logit marks the predicted
    rationales; those positions are forced to suppress_value while all other
    positions draw uniform logits, and each post's perturbed vector is
    softmaxed over its token axis to form the replacement gate vector.
    """
    model = extractor if isinstance(extractor, RltModel) else rlt_from_checkpoint(extractor)
    if not model.heads.rationale:
        raise ContractError("extractor checkpoint lacks a rationale head")
    logits = {p.id: predict_rationale_scores(model, p).logits for p in posts}
    pooled = np.concatenate([v for v in logits.values()]) if logits else np.array([])
    threshold = nearest_rank_percentile(pooled, config.quartile)
    rng = np.random.default_rng(config.seed)
    gates: dict[str, np.ndarray] = {}
    suppressed: dict[str, np.ndarray] = {}
    for p in posts:
        raw = logits[p.id]
        supp = raw >= threshold
        perturbed = rng.uniform(config.random_low, config.random_high, size=raw.size)
        perturbed[supp] = config.suppress_value
        shifted = perturbed - perturbed.max()
        e = np.exp(shifted)
        gates[p.id] = e / e.sum()
        suppressed[p.id] = supp
    return AblationResult(gates=gates, suppressed=suppressed, threshold=threshold)


def run_ablation_experiment(models: dict[str, ClassifierModel], test: list[TokenizedPost],
                            extractor: Checkpoint | RltModel, config: AblationConfig) -> dict:
    """Macro-F1 change per gated model when its gates are randomized."""
    result = random_rationale_ablation(extractor, test, config)
    rows = []
    for name in sorted(models):
        model = models[name]
        if not model.gated:
            raise ContractError(f"model '{name}' is not gated; ablation does not apply")
        base = eval_macro_f1(model, test)
        pert = eval_macro_f1(model, test, gates_map=result.gates)
        change = (pert - base) / base * 100.0 if base else 0.0
        rows.append({
            "variant": name,
            "dataset": test[0].dataset_id if test else "",
            "baseline_f1": float(base),
            "perturbed_f1": float(pert),
            "pct_change": float(change),
        })
    return {"threshold": result.threshold, "rows": rows,
            "config": dataclasses.asdict(config)}


# -- hyperparameter sweep --


def sweep(spec: SweepSpec, posts: list[TokenizedPost], heads: HeadConfig,
          config: TrainConfig, seed: int) -> dict:
    """Grid over learning rate and the two loss weights; dev metric decides."""
    grid = []
    best = None
    for lr in spec.learning_rates:
        for beta in spec.betas:
            for gamma in spec.gammas:
                cfg = dataclasses.replace(config, lr=lr)
                _, log = train_rlt(posts, heads, LossWeights(beta=beta, gamma=gamma), cfg, seed)
                dev = max(entry["dev_metric"] for entry in log)
                row = {"lr": lr, "beta": beta, "gamma": gamma, "dev_metric": float(dev)}
                grid.append(row)
                if best is None or row["dev_metric"] > best["dev_metric"]:
                    best = row
    return {"best": best, "grid": grid}


# -- explanation evaluation --


def explainability_evaluation(models: dict[str, ClassifierModel],
                              posts: list[TokenizedPost], k: int = 5,
                              n_samples: int = 200, seed: int = 0) -> dict:
    """Plausibility and faithfulness table over rationale-annotated posts.

    Gated models are scored by their extractor's min-max-normalized rationale
    probabilities; ungated models get surrogate and occlusion importances.
    Discrete plausibility metrics use the top-k mask of the scores.
    """
    usable = []
    for p in posts:
        if p.rationale is None or sum(p.rationale) == 0:
            warnings.warn(f"post {p.id} lacks ground-truth rationales; excluded")
            continue
        usable.append(p)
    if not usable:
        raise DataError("no annotated posts to evaluate")

    rows = []
    for name in sorted(models):
        model = models[name]
        predictor = make_predictor(model)
        methods = ["extractor"] if model.gated else ["surrogate", "occlusion"]
        for method in methods:
            per_post = {"auprc": [], "token_f1": [], "iou_f1": [],
                        "comprehensiveness": [], "sufficiency": []}
            for i, post in enumerate(usable):
                probs = predictor(post.tokens)
                pred_class = int(np.argmax(probs))
                if method == "extractor":
                    rs = predict_rationale_scores(model.extractor, post)
                    raw = rs.scores[1:]
                elif method == "surrogate":
                    raw = surrogate_importances(predictor, post.tokens, pred_class,
                                                n_samples=max(n_samples, 2 * len(post.tokens)),
                                                seed=seed * 7919 + i).scores
                else:
                    raw = occlusion_importances(predictor, post.tokens, pred_class).scores
                n = min(len(raw), len(post.rationale))
                scores = minmax_normalize(raw[:n])
                gold = list(post.rationale[:n])
                if sum(gold) == 0:
                    continue
                topk = top_k_rationales(scores, k)
                pred_mask = [1 if i2 in topk else 0 for i2 in range(n)]
                per_post["auprc"].append(auprc(scores, gold))
                per_post["token_f1"].append(token_f1(pred_mask, gold).f1)
                per_post["iou_f1"].append(iou_f1(mask_to_spans(pred_mask), mask_to_spans(gold)))
                fi = FaithfulnessInput(predictor=predictor, tokens=list(post.tokens[:n]),
                                       rationale=set(topk), predicted_class=pred_class)
                per_post["comprehensiveness"].append(comprehensiveness(fi))
                per_post["sufficiency"].append(sufficiency(fi))
            row = {"model": name, "method": method, "n_posts": len(per_post["auprc"])}
            for key, vals in per_post.items():
                row[key] = float(np.mean(vals)) if vals else None
            rows.append(row)
    return {"k": k, "rows": rows}


# -- report rendering and IO --


def render_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned plain-text table."""
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_jsonl(records: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return path
