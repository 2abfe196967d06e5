"""Toy transformer encoder: whitespace tokenizer, vocab, and encode().

Stands in for a pretrained sentence encoder at desk scale. Produces the
per-token last hidden state matrix plus a tanh-pooled sentence vector taken
from the reserved first position (the CLS slot). Sequences are processed one
at a time, so padding is never required, but padded input is supported and
padded positions are guaranteed zero attention weight from every query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataError, ShapeError

PAD, UNK, CLS = "<pad>", "<unk>", "<cls>"
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2

MASKED_SCORE = -1e9


class Vocabulary:
    """Token <-> id map; ids 0..2 are reserved for <pad>, <unk>, <cls>."""

    def __init__(self, tokens: list[str]):
        if tokens[:3] != [PAD, UNK, CLS]:
            raise DataError("vocabulary must start with <pad>, <unk>, <cls>")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, corpus: list[list[str]], max_size: int | None = None, min_count: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for toks in corpus:
            for t in toks:
                counts[t] = counts.get(t, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        kept = [t for t in ordered if counts[t] >= min_count and t not in (PAD, UNK, CLS)]
        if max_size is not None:
            kept = kept[: max(0, max_size - 3)]
        return cls([PAD, UNK, CLS] + kept)

    def encode(self, tokens: list[str], max_len: int, pad_to: int | None = None) -> np.ndarray:
        """Map tokens to ids with a leading CLS, truncated to max_len ids."""
        ids = [CLS_ID] + [self.index.get(t, UNK_ID) for t in tokens]
        ids = ids[:max_len]
        if pad_to is not None:
            if pad_to < len(ids):
                raise ContractError(f"pad_to={pad_to} shorter than sequence {len(ids)}")
            ids = ids + [PAD_ID] * (pad_to - len(ids))
        return np.asarray(ids, dtype=np.int64)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line != "\n"])


@dataclass
class EncoderConfig:
    vocab_size: int
    max_len: int = 128
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    dropout_rate: float = 0.0
    use_positional: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 3:
            raise ContractError("vocab_size must cover the reserved specials")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "dropout_rate": self.dropout_rate,
            "use_positional": self.use_positional,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class HiddenStates:
    """Per-token last hidden state (T, d), pooled CLS vector (1, d), real-token mask (T,)."""

    lhs: Tensor
    pooled: Tensor
    mask: np.ndarray
    attention: list[np.ndarray] = field(default_factory=list)


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator,
                        dtype=np.float32, prefix: str = "") -> dict[str, Tensor]:
    """Fresh encoder parameters, N(0, 0.02) weights, standard LN/bias init."""

    def w(shape, scale=0.02):
        return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    d, ff = config.d_model, config.d_ff
    p: dict[str, Tensor] = {}
    p[prefix + "emb.tok"] = w((config.vocab_size, d))
    if config.use_positional:
        p[prefix + "emb.pos"] = w((config.max_len, d))
    for i in range(config.n_layers):
        L = f"{prefix}enc{i}."
        for nm in ("wq", "wk", "wv", "wo"):
            p[L + "attn." + nm] = w((d, d))
        for nm in ("bq", "bk", "bv", "bo"):
            p[L + "attn." + nm] = zeros((d,))
        p[L + "ln1.g"] = ones((d,))
        p[L + "ln1.b"] = zeros((d,))
        p[L + "ff.w1"] = w((d, ff))
        p[L + "ff.b1"] = zeros((ff,))
        p[L + "ff.w2"] = w((ff, d))
        p[L + "ff.b2"] = zeros((d,))
        p[L + "ln2.g"] = ones((d,))
        p[L + "ln2.b"] = zeros((d,))
    p[prefix + "pool.w"] = w((d, d))
    p[prefix + "pool.b"] = zeros((d,))
    return p


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor,
                         key_mask: np.ndarray | None,
                         params: dict[str, Tensor], prefix: str,
                         n_heads: int) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention, one head per d_model/n_heads slice.

    key_mask marks real key positions (1) vs padded (0); masked keys get an
    additive score of MASKED_SCORE, which underflows to exactly zero weight.
    Returns (output (Tq, d), attention weights (n_heads, Tq, Tk)).
    """
    if key.data.shape[0] != value.data.shape[0]:
        raise ShapeError("attention: key and value row counts differ")
    d = query.data.shape[1]
    if d % n_heads:
        raise ShapeError(f"attention: {n_heads} heads do not divide width {d}")
    tk = key.data.shape[0]
    if key_mask is not None and np.asarray(key_mask).shape != (tk,):
        raise ShapeError(f"attention: mask shape {np.shape(key_mask)} != ({tk},)")

    q = ad.add_bias(query @ params[prefix + "wq"], params[prefix + "bq"])
    k = ad.add_bias(key @ params[prefix + "wk"], params[prefix + "bk"])
    v = ad.add_bias(value @ params[prefix + "wv"], params[prefix + "bv"])

    bias = None
    if key_mask is not None and not np.all(key_mask):
        row = np.where(np.asarray(key_mask) > 0, 0.0, MASKED_SCORE).astype(query.dtype)
        bias = Tensor(np.tile(row, (query.data.shape[0], 1)))

    dk = d // n_heads
    inv_sqrt = 1.0 / np.sqrt(dk)
    heads = []
    weights = []
    for h in range(n_heads):
        lo, hi = h * dk, (h + 1) * dk
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        scores = ad.scale(qh @ ad.transpose(kh), inv_sqrt)
        if bias is not None:
            scores = scores + bias
        attn = ad.softmax(scores, axis=-1)
        weights.append(attn.data)
        heads.append(attn @ vh)
    out = ad.add_bias(ad.concat_cols(heads) @ params[prefix + "wo"], params[prefix + "bo"])
    return out, np.stack(weights)


def encode(ids: np.ndarray, params: dict[str, Tensor], config: EncoderConfig,
           prefix: str = "", train: bool = False,
           rng: np.random.Generator | None = None,
           collect_attention: bool = False) -> HiddenStates:
    """Run the encoder over one id sequence (CLS first, optional trailing pads)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ContractError("encode expects a non-empty 1-D id sequence")
    if ids.size > config.max_len:
        raise ContractError(f"sequence length {ids.size} exceeds max_len {config.max_len}")
    if ids.max() >= config.vocab_size:
        raise ContractError("token id out of vocabulary range")
    if ids[0] != CLS_ID:
        raise ContractError("position 0 must be the CLS token")
    mask = (ids != PAD_ID).astype(np.int64)

    x = ad.embedding(params[prefix + "emb.tok"], ids)
    if config.use_positional:
        x = x + ad.embedding(params[prefix + "emb.pos"], np.arange(ids.size))
    use_dropout = train and config.dropout_rate > 0.0
    if use_dropout:
        if rng is None:
            raise ContractError("dropout requires an rng during training")
        x = ad.dropout(x, config.dropout_rate, rng)

    attn_maps = []
    for i in range(config.n_layers):
        L = f"{prefix}enc{i}."
        h, w = multi_head_attention(x, x, x, mask, params, L + "attn.", config.n_heads)
        if collect_attention:
            attn_maps.append(w)
        if use_dropout:
            h = ad.dropout(h, config.dropout_rate, rng)
        x = ad.layer_norm(x + h, params[L + "ln1.g"], params[L + "ln1.b"])
        f = ad.add_bias(ad.gelu(ad.add_bias(x @ params[L + "ff.w1"], params[L + "ff.b1"])) @ params[L + "ff.w2"],
                        params[L + "ff.b2"])
        if use_dropout:
            f = ad.dropout(f, config.dropout_rate, rng)
        x = ad.layer_norm(x + f, params[L + "ln2.g"], params[L + "ln2.b"])

    cls_row = ad.slice_rows(x, 0, 1)
    pooled = ad.tanh(ad.add_bias(cls_row @ params[prefix + "pool.w"], params[prefix + "pool.b"]))
    return HiddenStates(lhs=x, pooled=pooled, mask=mask, attention=attn_maps)
