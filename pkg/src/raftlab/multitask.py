"""Multitask rationale extractor: three heads over one shared encoder.

The heads are a per-token rationale classifier, a multi-class label
classifier over the pooled CLS vector, and a multi-label target-community
classifier. Any subset may be enabled. The joint loss is

    total = label + beta * rationale + gamma * target

with beta/gamma defaulting to 2 and 10. The rationale loss is binary
cross-entropy against the ground-truth mask (CLS labelled 0, padding
excluded); targets use per-class binary cross-entropy averaged over classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint
from .corpus import TokenizedPost
from .encoder import EncoderConfig, HiddenStates, Vocabulary, encode, init_encoder_params
from .errors import ContractError, DataError
from .metrics import macro_f1
from .training import TrainConfig, fit

RATIONALE_THRESHOLD = 0.5


@dataclass
class LossWeights:
    beta: float = 2.0
    gamma: float = 10.0

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_label: float
    l_rationale: float
    l_target: float
    l_total: float


@dataclass
class HeadConfig:
    """Which heads are active, plus their output spaces."""

    rationale: bool = True
    label: bool = True
    target: bool = True
    classes: list[str] = field(default_factory=lambda: ["abusive", "normal"])
    targets: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not (self.rationale or self.label or self.target):
            raise ContractError("at least one head must be enabled")
        if self.label and len(self.classes) < 2:
            raise ContractError("label head needs at least two classes")
        if self.target and not self.targets:
            raise ContractError("target head enabled without a target vocabulary")
        if len(set(self.targets)) != len(self.targets):
            raise ContractError("target vocabulary contains duplicates")


@dataclass
class RltModel:
    encoder: EncoderConfig
    heads: HeadConfig
    vocab: Vocabulary
    params: dict[str, Tensor]


@dataclass
class RltOutputs:
    rationale_logits: Tensor | None
    label_logits: Tensor | None
    target_logits: Tensor | None
    hidden: HiddenStates
    ids: np.ndarray


@dataclass
class RationaleScores:
    """Sigmoid gate values (and raw logits) per position, CLS included at 0."""

    scores: np.ndarray
    logits: np.ndarray


def init_rlt_params(encoder_cfg: EncoderConfig, heads: HeadConfig,
                    rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params = init_encoder_params(encoder_cfg, rng, dtype=dtype)
    d = encoder_cfg.d_model

    def w(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    if heads.rationale:
        params["head.rat.w"] = w((d, 1))
        params["head.rat.b"] = zeros((1,))
    if heads.label:
        params["head.lab.w"] = w((d, len(heads.classes)))
        params["head.lab.b"] = zeros((len(heads.classes),))
    if heads.target:
        params["head.tgt.w"] = w((d, len(heads.targets)))
        params["head.tgt.b"] = zeros((len(heads.targets),))
    return params


def rlt_forward(model: RltModel, post: TokenizedPost, pad_to: int | None = None,
                train: bool = False, rng: np.random.Generator | None = None) -> RltOutputs:
    """Encode one post and apply every enabled head."""
    if not post.tokens:
        raise ContractError(f"post {post.id} has no tokens")
    ids = model.vocab.encode(post.tokens, model.encoder.max_len, pad_to=pad_to)
    hidden = encode(ids, model.params, model.encoder, train=train, rng=rng)
    rat = lab = tgt = None
    if model.heads.rationale:
        rat = ad.add_bias(hidden.lhs @ model.params["head.rat.w"], model.params["head.rat.b"])
    if model.heads.label:
        lab = ad.add_bias(hidden.pooled @ model.params["head.lab.w"], model.params["head.lab.b"])
    if model.heads.target:
        tgt = ad.add_bias(hidden.pooled @ model.params["head.tgt.w"], model.params["head.tgt.b"])
    return RltOutputs(rat, lab, tgt, hidden, ids)


def rlt_loss(model: RltModel, outputs: RltOutputs, post: TokenizedPost,
             weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Joint loss; the breakdown is assembled in float64 so that
    l_total == l_label + beta*l_rationale + gamma*l_target holds exactly."""
    heads = model.heads
    total: Tensor | None = None
    l_label = l_rat = l_tgt = 0.0

    if heads.label:
        if post.label not in heads.classes:
            raise DataError(f"post {post.id}: label '{post.label}' not in class set")
        target = np.asarray([heads.classes.index(post.label)])
        lab_loss = ad.cross_entropy_logits(outputs.label_logits, target)
        l_label = lab_loss.item()
        total = lab_loss

    if heads.rationale:
        if post.rationale is None:
            raise DataError(f"post {post.id}: rationale head enabled but mask missing")
        n = outputs.ids.size
        gold = np.zeros((n, 1), dtype=np.float64)
        content = post.rationale[: n - 1]
        gold[1 : 1 + len(content), 0] = content
        mask = outputs.hidden.mask.astype(np.float64)[:, None]
        rat_loss = ad.bce_logits(outputs.rationale_logits, gold, mask=mask)
        l_rat = rat_loss.item()
        term = ad.scale(rat_loss, weights.beta)
        total = term if total is None else total + term

    if heads.target:
        y = np.asarray([[1.0 if t in post.targets else 0.0 for t in heads.targets]])
        tgt_loss = ad.bce_logits(outputs.target_logits, y)
        l_tgt = tgt_loss.item()
        term = ad.scale(tgt_loss, weights.gamma)
        total = term if total is None else total + term

    breakdown = LossBreakdown(
        l_label=l_label,
        l_rationale=l_rat,
        l_target=l_tgt,
        l_total=l_label + weights.beta * l_rat + weights.gamma * l_tgt,
    )
    return total, breakdown


def _build_model(encoder_cfg, heads, vocab, params) -> RltModel:
    return RltModel(encoder=encoder_cfg, heads=heads, vocab=vocab, params=params)


def model_from_checkpoint(ckpt: Checkpoint, requires_grad: bool = False) -> RltModel:
    cfg = ckpt.config
    if cfg.get("kind") != "rlt":
        raise ContractError(f"checkpoint kind '{cfg.get('kind')}' is not an extractor")
    heads = HeadConfig(
        rationale=cfg["heads"]["rationale"],
        label=cfg["heads"]["label"],
        target=cfg["heads"]["target"],
        classes=list(cfg.get("classes", ["abusive", "normal"])),
        targets=list(cfg.get("targets", [])),
    )
    return RltModel(
        encoder=EncoderConfig.from_dict(cfg["encoder"]),
        heads=heads,
        vocab=Vocabulary(list(cfg["vocab"])),
        params=ckpt.tensors(requires_grad=requires_grad),
    )


def train_rlt(posts: list[TokenizedPost], heads: HeadConfig, weights: LossWeights,
              config: TrainConfig, seed: int) -> tuple[Checkpoint, list[dict]]:
    """Train the extractor on the train split, select the dev-best epoch.

    Selection metric is dev rationale macro-F1 when the rationale head is on,
    otherwise dev label macro-F1.
    """
    train = [p for p in posts if p.split == "train"]
    dev = [p for p in posts if p.split == "dev"]
    if not train:
        raise DataError("training split is empty")
    if not dev:
        raise DataError("dev split is empty")

    vocab = Vocabulary.build([p.tokens for p in train], max_size=config.max_vocab)
    encoder_cfg = EncoderConfig(
        vocab_size=len(vocab), max_len=config.max_len, d_model=config.d_model,
        n_heads=config.n_heads, n_layers=config.n_layers, d_ff=config.d_ff,
        dropout_rate=config.dropout_rate, use_positional=config.use_positional,
    )
    rng = np.random.default_rng([seed, 7])
    params = init_rlt_params(encoder_cfg, heads, rng)
    model = _build_model(encoder_cfg, heads, vocab, params)

    def loss_fn(post, train_rng):
        out = rlt_forward(model, post, train=True, rng=train_rng)
        total, brk = rlt_loss(model, out, post, weights)
        return total, {
            "l_label": brk.l_label, "l_rationale": brk.l_rationale,
            "l_target": brk.l_target, "l_total": brk.l_total,
        }

    if heads.rationale:
        def dev_metric():
            return rationale_macro_f1(model, dev)
    else:
        def dev_metric():
            return label_macro_f1(model, dev)

    _, log = fit(params, train, loss_fn, dev_metric, config, seed)

    ckpt_config = {
        "kind": "rlt",
        "encoder": encoder_cfg.to_dict(),
        "heads": {"rationale": heads.rationale, "label": heads.label, "target": heads.target},
        "classes": heads.classes,
        "targets": heads.targets,
        "vocab": vocab.tokens,
        "weights": {"beta": weights.beta, "gamma": weights.gamma},
        "train": {"lr": config.lr, "batch_size": config.batch_size,
                  "max_epochs": config.max_epochs, "patience": config.patience},
        "seed": seed,
    }
    ckpt = Checkpoint(config=ckpt_config,
                      params={k: p.data.astype(np.float32) for k, p in params.items()})
    return ckpt, log


def predict_rationale_scores(source: Checkpoint | RltModel, post: TokenizedPost) -> RationaleScores:
    """Per-position sigmoid rationale probabilities plus raw logits (CLS at 0)."""
    model = source if isinstance(source, RltModel) else model_from_checkpoint(source)
    if not model.heads.rationale:
        raise ContractError("checkpoint was trained without a rationale head")
    out = rlt_forward(model, post)
    logits = out.rationale_logits.data[:, 0].astype(np.float64)
    scores = 1.0 / (1.0 + np.exp(-logits))
    return RationaleScores(scores=scores, logits=logits)


def predict_label(source: Checkpoint | RltModel, post: TokenizedPost) -> tuple[str, np.ndarray]:
    model = source if isinstance(source, RltModel) else model_from_checkpoint(source)
    if not model.heads.label:
        raise ContractError("checkpoint was trained without a label head")
    out = rlt_forward(model, post)
    probs = ad.softmax(out.label_logits, axis=-1).data[0].astype(np.float64)
    return model.heads.classes[int(np.argmax(probs))], probs


def rationale_macro_f1(source: Checkpoint | RltModel, posts: list[TokenizedPost],
                       threshold: float = RATIONALE_THRESHOLD) -> float:
    """Macro F1 over {0,1} token classes, pooled across posts (CLS excluded)."""
    model = source if isinstance(source, RltModel) else model_from_checkpoint(source)
    gold: list[int] = []
    pred: list[int] = []
    for post in posts:
        if post.rationale is None:
            continue
        rs = predict_rationale_scores(model, post)
        content = rs.scores[1:]
        truth = post.rationale[: content.size]
        gold.extend(int(v) for v in truth)
        pred.extend(int(s >= threshold) for s in content[: len(truth)])
    if not gold:
        raise DataError("no posts with ground-truth rationales to evaluate")
    return macro_f1(gold, pred, classes=[0, 1])


def label_macro_f1(source: Checkpoint | RltModel, posts: list[TokenizedPost]) -> float:
    model = source if isinstance(source, RltModel) else model_from_checkpoint(source)
    gold = [p.label for p in posts]
    pred = [predict_label(model, p)[0] for p in posts]
    return macro_f1(gold, pred, classes=model.heads.classes)
