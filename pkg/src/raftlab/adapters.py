"""Rationale-gated classifiers and the label-only baseline.

Both gated variants scale each row of their encoder's last hidden state by
the frozen extractor's per-token rationale probability, then attend:

  * self-attention variant (sa): the gated matrix is query, key, and value;
    output rows are mean-pooled over real positions and classified.
  * cross-attention variant (ca): the CLS-pooled vector is the single query;
    the gated matrix provides keys and values; the attended vector is
    classified directly.

The extractor is embedded (frozen) in the classifier checkpoint so a saved
model is self-contained; its hash is recorded for provenance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint
from .corpus import TokenizedPost
from .encoder import (CLS_ID, EncoderConfig, Vocabulary, encode,
                      init_encoder_params, multi_head_attention)
from .errors import ContractError, DataError, ShapeError
from .metrics import macro_f1
from .multitask import RltModel, model_from_checkpoint as rlt_from_checkpoint
from .training import TrainConfig, fit

VARIANTS = ("sa", "ca")


@dataclass
class RaftConfig:
    """Gated-classifier settings; extractor must have a rationale head."""

    variant: str
    classes: list[str]
    n_heads: int = 4
    gate_cls_override: bool = True
    extractor: Checkpoint | str | None = None
    extractor_ref: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant '{self.variant}', expected one of {VARIANTS}")

    def resolve_extractor(self) -> Checkpoint:
        if isinstance(self.extractor, Checkpoint):
            return self.extractor
        if isinstance(self.extractor, str):
            return Checkpoint.load(self.extractor)
        raise ContractError("raft config lacks an extractor checkpoint")


@dataclass
class ClassifierModel:
    kind: str  # "baseline", "raft_sa", "raft_ca"
    encoder: EncoderConfig
    vocab: Vocabulary
    params: dict[str, Tensor]
    classes: list[str]
    attn_heads: int = 4
    gate_cls_override: bool = True
    extractor: RltModel | None = None
    extractor_hash: str | None = None

    @property
    def gated(self) -> bool:
        return self.kind != "baseline"


def _rationale_logits_for_tokens(extractor: RltModel, tokens: list[str]) -> np.ndarray:
    ids = extractor.vocab.encode(tokens, extractor.encoder.max_len)
    hidden = encode(ids, extractor.params, extractor.encoder)
    logits = ad.add_bias(hidden.lhs @ extractor.params["head.rat.w"], extractor.params["head.rat.b"])
    return logits.data[:, 0].astype(np.float64)


def compute_gates(extractor: RltModel, tokens: list[str], cls_override: bool = True) -> np.ndarray:
    """Sigmoid rationale probabilities used as gates; CLS forced to 1.0 so
    sentence-level pooling survives aggressive gating."""
    if not extractor.heads.rationale:
        raise ContractError("extractor checkpoint lacks a rationale head")
    logits = _rationale_logits_for_tokens(extractor, tokens)
    gates = 1.0 / (1.0 + np.exp(-logits))
    if cls_override:
        gates[0] = 1.0
    return gates


def init_classifier_params(kind: str, encoder_cfg: EncoderConfig, n_classes: int,
                           n_heads: int, rng: np.random.Generator,
                           dtype=np.float32) -> dict[str, Tensor]:
    params = init_encoder_params(encoder_cfg, rng, dtype=dtype)
    d = encoder_cfg.d_model

    def w(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    if kind != "baseline":
        for nm in ("wq", "wk", "wv", "wo"):
            params["ratt." + nm] = w((d, d))
        for nm in ("bq", "bk", "bv", "bo"):
            params["ratt." + nm] = zeros((d,))
    params["cls.w"] = w((d, n_classes))
    params["cls.b"] = zeros((n_classes,))
    return params


def forward_tokens(model: ClassifierModel, tokens: list[str],
                   gates: np.ndarray | None = None, ungated: bool = False,
                   train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Label logits (1, C) for one token sequence.

    gates overrides the extractor's rationale probabilities (used by the
    random-gate ablation); ungated skips the gating op entirely.
    """
    ids = model.vocab.encode(tokens, model.encoder.max_len)
    hidden = encode(ids, model.params, model.encoder, train=train, rng=rng)

    if not model.gated:
        feats = hidden.pooled
    else:
        x = hidden.lhs
        if not ungated:
            if gates is None:
                if model.extractor is None:
                    raise ContractError("gated model has no extractor attached")
                gates = compute_gates(model.extractor, tokens, model.gate_cls_override)
            gates = np.asarray(gates, dtype=np.float64)
            if gates.shape != (ids.size,):
                raise ShapeError(
                    f"gate vector length {gates.shape} does not align with {ids.size} encoded positions")
            x = ad.scale_rows(x, Tensor(gates.astype(x.dtype)))
        if model.kind == "raft_sa":
            att, _ = multi_head_attention(x, x, x, hidden.mask, model.params, "ratt.", model.attn_heads)
            feats = ad.masked_mean(att, hidden.mask)
        else:
            att, _ = multi_head_attention(hidden.pooled, x, x, hidden.mask,
                                          model.params, "ratt.", model.attn_heads)
            feats = att
    return ad.add_bias(feats @ model.params["cls.w"], model.params["cls.b"])


def forward_classifier(model: ClassifierModel, post: TokenizedPost, **kw) -> Tensor:
    return forward_tokens(model, post.tokens, **kw)


def predict_proba(model: ClassifierModel, tokens: list[str],
                  gates: np.ndarray | None = None) -> np.ndarray:
    logits = forward_tokens(model, tokens, gates=gates)
    return ad.softmax(logits, axis=-1).data[0].astype(np.float64)


def make_predictor(model: ClassifierModel):
    """Token-sequence -> class-probability callable for metrics/explainers."""

    def predictor(tokens: list[str]) -> np.ndarray:
        return predict_proba(model, list(tokens))

    return predictor


def eval_macro_f1(model: ClassifierModel, posts: list[TokenizedPost],
                  gates_map: dict[str, np.ndarray] | None = None) -> float:
    gold, pred = [], []
    for p in posts:
        gates = gates_map.get(p.id) if gates_map else None
        probs = predict_proba(model, p.tokens, gates=gates)
        gold.append(p.label)
        pred.append(model.classes[int(np.argmax(probs))])
    return macro_f1(gold, pred, classes=model.classes)


def _checkpoint_config(model: ClassifierModel, train_cfg: TrainConfig, seed: int,
                       extractor_ckpt: Checkpoint | None, extractor_ref: str) -> dict:
    cfg = {
        "kind": model.kind,
        "encoder": model.encoder.to_dict(),
        "vocab": model.vocab.tokens,
        "classes": model.classes,
        "train": {"lr": train_cfg.lr, "batch_size": train_cfg.batch_size,
                  "max_epochs": train_cfg.max_epochs, "patience": train_cfg.patience},
        "seed": seed,
    }
    if model.gated:
        cfg["raft"] = {
            "variant": model.kind.removeprefix("raft_"),
            "n_heads": model.attn_heads,
            "gate_cls_override": model.gate_cls_override,
            "extractor_hash": extractor_ckpt.sha256(),
            "extractor_ref": extractor_ref,
        }
        cfg["extractor"] = extractor_ckpt.config
    return cfg


def model_from_checkpoint(ckpt: Checkpoint) -> ClassifierModel:
    cfg = ckpt.config
    kind = cfg.get("kind")
    if kind not in ("baseline", "raft_sa", "raft_ca"):
        raise ContractError(f"checkpoint kind '{kind}' is not a classifier")
    own = {k: v for k, v in ckpt.params.items() if not k.startswith("extractor.")}
    extractor = None
    ex_hash = None
    attn_heads = 4
    override = True
    if kind != "baseline":
        sub = Checkpoint(
            config=cfg["extractor"],
            params={k.removeprefix("extractor."): v
                    for k, v in ckpt.params.items() if k.startswith("extractor.")},
        )
        extractor = rlt_from_checkpoint(sub)
        ex_hash = cfg["raft"]["extractor_hash"]
        attn_heads = cfg["raft"]["n_heads"]
        override = cfg["raft"]["gate_cls_override"]
    return ClassifierModel(
        kind=kind,
        encoder=EncoderConfig.from_dict(cfg["encoder"]),
        vocab=Vocabulary(list(cfg["vocab"])),
        params={k: Tensor(v.copy(), requires_grad=False) for k, v in own.items()},
        classes=list(cfg["classes"]),
        attn_heads=attn_heads,
        gate_cls_override=override,
        extractor=extractor,
        extractor_hash=ex_hash,
    )


def train_classifier(train: list[TokenizedPost], dev: list[TokenizedPost],
                     kind: str, classes: list[str], config: TrainConfig, seed: int,
                     raft: RaftConfig | None = None,
                     init_params: dict[str, np.ndarray] | None = None,
                     vocab: Vocabulary | None = None) -> tuple[Checkpoint, list[dict]]:
    """Shared trainer for the baseline and both gated variants.

    For gated variants the extractor is loaded once, its gate vectors are
    precomputed per post (the extractor is frozen, so they never change),
    and its parameters are embedded read-only in the output checkpoint.
    """
    if not train:
        raise DataError("empty training set")
    if kind not in ("baseline", "raft_sa", "raft_ca"):
        raise ContractError(f"unknown classifier kind '{kind}'")

    extractor_ckpt = None
    extractor = None
    if kind != "baseline":
        if raft is None:
            raise ContractError("gated classifier requires a RaftConfig")
        extractor_ckpt = raft.resolve_extractor()
        extractor = rlt_from_checkpoint(extractor_ckpt)
        if not extractor.heads.rationale:
            raise ContractError("extractor checkpoint lacks a rationale head")

    if vocab is None:
        vocab = Vocabulary.build([p.tokens for p in train], max_size=config.max_vocab)
    encoder_cfg = EncoderConfig(
        vocab_size=len(vocab), max_len=config.max_len, d_model=config.d_model,
        n_heads=config.n_heads, n_layers=config.n_layers, d_ff=config.d_ff,
        dropout_rate=config.dropout_rate, use_positional=config.use_positional,
    )
    rng = np.random.default_rng([seed, 11])
    n_heads = raft.n_heads if raft else 4
    params = init_classifier_params(kind, encoder_cfg, len(classes), n_heads, rng)
    if init_params is not None:
        for name, arr in init_params.items():
            if name in params and params[name].data.shape == arr.shape:
                params[name].data = arr.astype(params[name].dtype).copy()

    model = ClassifierModel(
        kind=kind, encoder=encoder_cfg, vocab=vocab, params=params, classes=classes,
        attn_heads=n_heads,
        gate_cls_override=raft.gate_cls_override if raft else True,
        extractor=extractor,
    )

    gates_map: dict[str, np.ndarray] = {}
    if model.gated:
        for p in train + dev:
            if p.id not in gates_map:
                gates_map[p.id] = compute_gates(extractor, p.tokens, model.gate_cls_override)

    class_index = {c: i for i, c in enumerate(classes)}

    def loss_fn(post, train_rng):
        if post.label not in class_index:
            raise DataError(f"post {post.id}: label '{post.label}' not in class set")
        logits = forward_tokens(model, post.tokens, gates=gates_map.get(post.id),
                                train=True, rng=train_rng)
        loss = ad.cross_entropy_logits(logits, np.asarray([class_index[post.label]]))
        return loss, {"l_label": loss.item(), "l_total": loss.item()}

    def dev_metric():
        if not dev:
            return 0.0
        return eval_macro_f1(model, dev, gates_map=gates_map)

    _, log = fit(params, train, loss_fn, dev_metric, config, seed)

    ckpt_params = {k: p.data.astype(np.float32) for k, p in params.items()}
    if extractor_ckpt is not None:
        for k, v in extractor_ckpt.params.items():
            ckpt_params["extractor." + k] = v
    ckpt = Checkpoint(
        config=_checkpoint_config(model, config, seed, extractor_ckpt,
                                  raft.extractor_ref if raft else ""),
        params=ckpt_params,
    )
    return ckpt, log


def train_raft(train: list[TokenizedPost], dev: list[TokenizedPost], raft: RaftConfig,
               config: TrainConfig, seed: int) -> tuple[Checkpoint, list[dict]]:
    return train_classifier(train, dev, "raft_" + raft.variant, raft.classes,
                            config, seed, raft=raft)


def baseline_l(train: list[TokenizedPost], dev: list[TokenizedPost], classes: list[str],
               config: TrainConfig, seed: int,
               init_params: dict[str, np.ndarray] | None = None,
               vocab: Vocabulary | None = None) -> tuple[Checkpoint, list[dict]]:
    return train_classifier(train, dev, "baseline", classes, config, seed,
                            init_params=init_params, vocab=vocab)
