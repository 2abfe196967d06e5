"""Harness: source selection, few-shot mechanics, ablation math, sweep grid."""

import dataclasses
import json
import math

import numpy as np
import pytest

from raftlab.adapters import compute_gates, eval_macro_f1, model_from_checkpoint, train_raft
from raftlab.adapters import RaftConfig
from raftlab.corpus import (GenConfig, SplitSpec, TokenizedPost, generate_synthetic,
                            make_splits, split_of)
from raftlab.errors import ContractError, DataError
from raftlab.harness import (AblationConfig, FewShotPlan, SweepSpec,
                             explainability_evaluation, nearest_rank_percentile,
                             pretrain_then_fewshot, random_rationale_ablation,
                             render_table, run_ablation_experiment,
                             run_fewshot_experiment, select_best_source, sweep,
                             write_json)
from raftlab.multitask import HeadConfig, LossWeights, train_rlt
from raftlab.multitask import model_from_checkpoint as rlt_from_checkpoint
from raftlab.training import TrainConfig

TINY_TRAIN = TrainConfig(lr=2e-3, batch_size=8, max_epochs=2, patience=2,
                         d_model=16, n_heads=2, n_layers=1, d_ff=24, max_len=32)


@pytest.fixture(scope="module")
def tiny_extractor(tiny_corpus):
    posts, manifest = tiny_corpus
    heads = HeadConfig(classes=manifest.classes, targets=manifest.targets)
    ckpt, _ = train_rlt(posts, heads, LossWeights(),
                        dataclasses.replace(TINY_TRAIN, max_epochs=4, patience=4), seed=0)
    return ckpt


# -- source selection --


def corpus_with_shift(rate, seed=5, dataset_id="d"):
    cfg = GenConfig(dataset_id=dataset_id, n_posts=120, background_size=40,
                    n_lexicon=5, n_markers=2, shift_rate=rate)
    posts, _ = generate_synthetic(cfg, seed=seed)
    return posts


def test_select_best_source_single_candidate():
    target = corpus_with_shift(0.0, dataset_id="t")
    cand = {"only": corpus_with_shift(0.2, dataset_id="only")}
    sel = select_best_source(target, cand)
    assert sel["selected"] == ["only"]


def test_select_best_source_identical_candidate_wins():
    target = corpus_with_shift(0.0, dataset_id="t")
    cand = {"same": corpus_with_shift(0.0, dataset_id="same"),
            "far": corpus_with_shift(0.6, dataset_id="far")}
    sel = select_best_source(target, cand)
    assert sel["selected"] == ["same"]
    assert sel["similarities"]["same"] == pytest.approx(1.0, abs=1e-12)


def test_select_best_source_prefers_smaller_shift():
    target = corpus_with_shift(0.0, dataset_id="t")
    cand = {"near": corpus_with_shift(0.1, dataset_id="near"),
            "far": corpus_with_shift(0.5, dataset_id="far")}
    sel = select_best_source(target, cand)
    assert sel["selected"] == ["near"]
    assert sel["similarities"]["near"] > sel["similarities"]["far"]


def test_select_best_source_pool_all_concatenates():
    target = corpus_with_shift(0.0, dataset_id="t")
    cand = {"a": corpus_with_shift(0.1, dataset_id="a"),
            "b": corpus_with_shift(0.2, dataset_id="b")}
    sel = select_best_source(target, cand, mode="pool-all")
    assert sel["selected"] == ["a", "b"]
    assert len(sel["posts"]) == len(cand["a"]) + len(cand["b"])


def test_select_best_source_errors():
    target = corpus_with_shift(0.0)
    with pytest.raises(DataError):
        select_best_source(target, {})
    with pytest.raises(ContractError):
        select_best_source(target, {"a": target}, mode="weird")


# -- nearest-rank percentile and ablation --


def test_nearest_rank_percentile():
    values = np.array([10.0, 20.0, 30.0, 40.0])
    assert nearest_rank_percentile(values, 0.75) == 30.0
    assert nearest_rank_percentile(np.array([7.0]), 0.75) == 7.0
    assert nearest_rank_percentile(np.arange(100.0), 0.75) == 74.0


def test_ablation_suppresses_at_least_a_quarter(tiny_corpus, tiny_extractor):
    posts, _ = tiny_corpus
    sample = split_of(posts, "test")
    result = random_rationale_ablation(tiny_extractor, sample, AblationConfig(seed=3))
    n_total = sum(len(p.tokens) + 1 for p in sample)
    n_supp = sum(int(m.sum()) for m in result.suppressed.values())
    assert n_supp >= math.ceil(n_total / 4)
    for p in sample:
        gates = result.gates[p.id]
        assert gates.shape == (len(p.tokens) + 1,)
        assert abs(gates.sum() - 1.0) < 1e-9


def test_ablation_deterministic(tiny_corpus, tiny_extractor):
    posts, _ = tiny_corpus
    sample = split_of(posts, "test")[:10]
    a = random_rationale_ablation(tiny_extractor, sample, AblationConfig(seed=11))
    b = random_rationale_ablation(tiny_extractor, sample, AblationConfig(seed=11))
    for p in sample:
        assert np.array_equal(a.gates[p.id], b.gates[p.id])


def test_ablation_suppressed_positions_follow_threshold(tiny_corpus, tiny_extractor):
    posts, _ = tiny_corpus
    sample = split_of(posts, "test")[:10]
    cfg = AblationConfig(seed=4)
    result = random_rationale_ablation(tiny_extractor, sample, cfg)
    from raftlab.multitask import predict_rationale_scores
    model = rlt_from_checkpoint(tiny_extractor)
    for p in sample:
        logits = predict_rationale_scores(model, p).logits
        assert np.array_equal(result.suppressed[p.id], logits >= result.threshold)


def test_ablation_config_validation():
    with pytest.raises(ContractError):
        AblationConfig(quartile=1.5)
    with pytest.raises(ContractError):
        AblationConfig(random_low=5.0, random_high=-5.0)


def test_unperturbed_gates_are_a_noop(tiny_corpus, tiny_extractor):
    posts, _ = tiny_corpus
    train, dev = split_of(posts, "train")[:16], split_of(posts, "dev")
    test = split_of(posts, "test")
    classes = sorted({p.label for p in posts})
    raft_cfg = RaftConfig(variant="sa", classes=classes, extractor=tiny_extractor)
    ckpt, _ = train_raft(train, dev, raft_cfg, TINY_TRAIN, seed=1)
    model = model_from_checkpoint(ckpt)
    own_gates = {p.id: compute_gates(model.extractor, p.tokens) for p in test}
    assert eval_macro_f1(model, test, gates_map=own_gates) == eval_macro_f1(model, test)


def test_run_ablation_experiment_rows(tiny_corpus, tiny_extractor):
    posts, _ = tiny_corpus
    train, dev = split_of(posts, "train")[:16], split_of(posts, "dev")
    test = split_of(posts, "test")
    classes = sorted({p.label for p in posts})
    raft_cfg = RaftConfig(variant="sa", classes=classes, extractor=tiny_extractor)
    ckpt, _ = train_raft(train, dev, raft_cfg, TINY_TRAIN, seed=1)
    model = model_from_checkpoint(ckpt)
    result = run_ablation_experiment({"raft_sa": model}, test, tiny_extractor,
                                     AblationConfig(seed=2))
    row = result["rows"][0]
    assert row["variant"] == "raft_sa"
    expected = (row["perturbed_f1"] - row["baseline_f1"]) / row["baseline_f1"] * 100.0
    assert row["pct_change"] == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ContractError):
        run_ablation_experiment({"nope": dataclasses.replace(model, kind="baseline")},
                                test, tiny_extractor, AblationConfig())


# -- few-shot experiment --


def small_plan(**kw):
    base = dict(k_values=(3,), n_sets=2, variants=("baseline",), seed=0,
                train=dataclasses.replace(TINY_TRAIN, max_epochs=1))
    base.update(kw)
    return FewShotPlan(**base)


def test_fewshot_report_structure(tiny_corpus):
    posts, _ = tiny_corpus
    report, _ = run_fewshot_experiment(small_plan(), posts)
    assert len(report["rows"]) == 1
    row = report["rows"][0]
    assert row["k"] == 3 and row["variant"] == "baseline"
    assert len(row["set_scores"]) == 2
    assert row["mean"] == pytest.approx(float(np.mean(row["set_scores"])), abs=1e-12)


def test_fewshot_single_cell_plan(tiny_corpus):
    posts, _ = tiny_corpus
    report, _ = run_fewshot_experiment(small_plan(n_sets=1), posts)
    assert len(report["rows"]) == 1
    assert len(report["rows"][0]["set_scores"]) == 1


def test_fewshot_mean_matches_raw_scores(tiny_corpus, tiny_extractor):
    posts, _ = tiny_corpus
    plan = small_plan(variants=("baseline", "raft_sa"), n_sets=2)
    report, _ = run_fewshot_experiment(plan, posts, extractor=tiny_extractor)
    for row in report["rows"]:
        assert abs(row["mean"] - float(np.mean(row["set_scores"]))) <= 1e-12


def test_fewshot_requires_extractor_for_gated_variants(tiny_corpus):
    posts, _ = tiny_corpus
    with pytest.raises(DataError):
        run_fewshot_experiment(small_plan(variants=("raft_sa",)), posts)


def test_fewshot_requires_source_for_dom(tiny_corpus):
    posts, _ = tiny_corpus
    with pytest.raises(DataError):
        run_fewshot_experiment(small_plan(variants=("baseline_dom",)), posts)


def test_fewshot_detects_test_leak(tiny_corpus):
    posts, _ = tiny_corpus
    leaky = [dataclasses.replace(p) for p in posts]
    counts = {}
    for p in leaky:
        if p.split == "train":
            counts[p.label] = counts.get(p.label, 0) + 1
    minority = min(counts, key=counts.get)
    k = counts[minority]  # draws every train post of the minority class
    train_post = next(p for p in leaky if p.split == "train" and p.label == minority)
    test_post = next(p for p in leaky if p.split == "test" and p.label == minority)
    # same id in train and test: sampling that id must trip the guard
    clone = dataclasses.replace(test_post, id=train_post.id)
    leaky[leaky.index(test_post)] = clone
    with pytest.raises(ContractError, match="leak"):
        run_fewshot_experiment(small_plan(k_values=(k,), n_sets=1), leaky)


def test_fewshot_report_deterministic(tiny_corpus, tiny_extractor, tmp_path):
    posts, _ = tiny_corpus
    plan = small_plan(variants=("baseline", "raft_sa"))
    r1, _ = run_fewshot_experiment(plan, posts, extractor=tiny_extractor)
    r2, _ = run_fewshot_experiment(plan, posts, extractor=tiny_extractor)
    p1 = write_json(r1, tmp_path / "r1.json")
    p2 = write_json(r2, tmp_path / "r2.json")
    assert p1.read_bytes() == p2.read_bytes()


def test_unknown_variant_rejected():
    with pytest.raises(ContractError):
        FewShotPlan(variants=("baseline", "mystery"))


# -- domain pretraining --


def test_pretrain_then_fewshot_beats_nothing(tiny_corpus):
    posts, _ = tiny_corpus
    source = corpus_with_shift(0.0, dataset_id="src")
    source = make_splits(source, SplitSpec(ratios=(0.8, 0.1, 0.1), seed=1))
    dev, test = split_of(posts, "dev"), split_of(posts, "test")
    shots = split_of(posts, "train")[:8]
    classes = sorted({p.label for p in posts})
    model, score = pretrain_then_fewshot(source, shots, dev, test, classes,
                                         TINY_TRAIN, seed=0)
    assert 0.0 <= score <= 1.0
    assert model.kind == "baseline"


def test_pretrain_zero_shots_near_chance(tiny_corpus):
    posts, _ = tiny_corpus
    source = corpus_with_shift(0.0, dataset_id="src")
    source = make_splits(source, SplitSpec(ratios=(0.8, 0.1, 0.1), seed=1))
    dev, test = split_of(posts, "dev"), split_of(posts, "test")
    classes = sorted({p.label for p in posts})
    _, score = pretrain_then_fewshot(source, [], dev, test, classes,
                                     dataclasses.replace(TINY_TRAIN, max_epochs=2), seed=0)
    assert score <= 0.6


# -- sweep --


def test_sweep_grid_of_one(tiny_corpus):
    posts, manifest = tiny_corpus
    heads = HeadConfig(classes=manifest.classes, targets=manifest.targets)
    spec = SweepSpec(learning_rates=(2e-3,), betas=(2,), gammas=(10,))
    result = sweep(spec, posts, heads, dataclasses.replace(TINY_TRAIN, max_epochs=1), seed=0)
    assert len(result["grid"]) == 1
    assert result["best"] == result["grid"][0]


def test_sweep_grid_size(tiny_corpus):
    posts, manifest = tiny_corpus
    heads = HeadConfig(classes=manifest.classes, targets=manifest.targets)
    spec = SweepSpec(learning_rates=(1e-3, 2e-3), betas=(1, 2), gammas=(5,))
    result = sweep(spec, posts, heads, dataclasses.replace(TINY_TRAIN, max_epochs=1), seed=0)
    assert len(result["grid"]) == 4
    assert max(result["grid"], key=lambda r: r["dev_metric"])["dev_metric"] == result["best"]["dev_metric"]


def test_default_sweep_covers_chosen_operating_point():
    spec = SweepSpec()
    assert 2 in spec.betas and 10 in spec.gammas
    assert spec.learning_rates == (1e-5, 3e-5, 5e-5)


# -- explanation evaluation and rendering --


def test_explainability_evaluation_rows(tiny_corpus, tiny_extractor):
    posts, _ = tiny_corpus
    train, dev = split_of(posts, "train")[:16], split_of(posts, "dev")
    test_abusive = [p for p in split_of(posts, "test") if p.label == "abusive"][:6]
    classes = sorted({p.label for p in posts})
    raft_cfg = RaftConfig(variant="sa", classes=classes, extractor=tiny_extractor)
    ckpt, _ = train_raft(train, dev, raft_cfg, TINY_TRAIN, seed=3)
    from raftlab.adapters import baseline_l
    b_ckpt, _ = baseline_l(train, dev, classes, TINY_TRAIN, seed=3)
    result = explainability_evaluation(
        {"raft_sa": model_from_checkpoint(ckpt), "baseline": model_from_checkpoint(b_ckpt)},
        test_abusive, k=5, n_samples=48, seed=0)
    methods = {(r["model"], r["method"]) for r in result["rows"]}
    assert methods == {("raft_sa", "extractor"), ("baseline", "surrogate"),
                       ("baseline", "occlusion")}
    for row in result["rows"]:
        assert row["n_posts"] == len(test_abusive)
        for key in ("auprc", "token_f1", "iou_f1", "comprehensiveness", "sufficiency"):
            assert row[key] is not None


def test_explainability_evaluation_skips_unannotated(tiny_corpus, tiny_extractor):
    posts, _ = tiny_corpus
    normal = [p for p in split_of(posts, "test") if p.label == "normal"][:3]
    with pytest.raises(DataError):
        with pytest.warns(UserWarning):
            explainability_evaluation({}, normal)


def test_perfect_extractor_scores_hit_ceiling(tiny_corpus, tiny_extractor):
    # the tiny extractor reaches the ceiling on the planted corpus, so its
    # AUPRC against the planted masks is exactly 1
    posts, _ = tiny_corpus
    model = rlt_from_checkpoint(tiny_extractor)
    from raftlab.metrics import auprc
    from raftlab.multitask import predict_rationale_scores
    test_abusive = [p for p in split_of(posts, "test") if p.label == "abusive"][:10]
    values = []
    for p in test_abusive:
        rs = predict_rationale_scores(model, p)
        values.append(auprc(rs.scores[1:], p.rationale))
    assert np.mean(values) >= 0.95


def test_render_table_alignment():
    rows = [{"a": 1.0, "b": "xy"}, {"a": 22.5, "b": "z"}]
    text = render_table(rows, ["a", "b"])
    lines = text.splitlines()
    assert lines[0].startswith("a")
    assert len(lines) == 4
    assert "22.5000" in lines[3]
