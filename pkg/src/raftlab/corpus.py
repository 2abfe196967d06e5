"""Corpus handling: ingestion, ground truth, splits, and synthetic data.

The synthetic generator is the verification substrate for the whole lab: it
plants an abusive lexicon whose positions are the ground-truth rationales,
marker tokens that determine target communities, and can derive vocabulary-
shifted variants to simulate cross-domain drift.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError

MAX_TOKENS = 128

SPLITS = ("train", "dev", "test")


@dataclass
class TokenizedPost:
    """One datapoint: tokens plus label/target/rationale annotations."""

    id: str
    tokens: list[str]
    label: str
    targets: list[str] = field(default_factory=list)
    annotator_rationales: list[list[int]] | None = None
    rationale: list[int] | None = None
    dataset_id: str = ""
    split: str | None = None

    def validate(self) -> None:
        n = len(self.tokens)
        if self.rationale is not None and len(self.rationale) != n:
            raise DataError(f"post {self.id}: rationale mask length {len(self.rationale)} != {n} tokens")
        for i, m in enumerate(self.annotator_rationales or []):
            if len(m) != n:
                raise DataError(f"post {self.id}: annotator mask {i} length {len(m)} != {n} tokens")
        if self.split is not None and self.split not in SPLITS:
            raise DataError(f"post {self.id}: unknown split tag '{self.split}'")


@dataclass
class DatasetManifest:
    dataset_id: str
    classes: list[str]
    targets: list[str] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    source: str | None = None

    def to_dict(self) -> dict:
        d = {
            "dataset_id": self.dataset_id,
            "classes": self.classes,
            "targets": self.targets,
            "counts": self.counts,
        }
        if self.source:
            d["source"] = self.source
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            dataset_id=d["dataset_id"],
            classes=list(d["classes"]),
            targets=list(d.get("targets", [])),
            counts=dict(d.get("counts", {})),
            source=d.get("source"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- JSONL ingestion --


def load_jsonl(path, manifest: DatasetManifest | None = None) -> list[TokenizedPost]:
    """Read and validate line-delimited posts; errors name the offending line."""
    posts: list[TokenizedPost] = []
    counts: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({e})") from e
            try:
                post = TokenizedPost(
                    id=str(rec["id"]),
                    tokens=list(rec["tokens"]),
                    label=str(rec["label"]),
                    targets=list(rec.get("targets", [])),
                    annotator_rationales=rec.get("annotator_rationales"),
                    rationale=rec.get("rationale"),
                    dataset_id=str(rec.get("dataset_id", manifest.dataset_id if manifest else "")),
                    split=rec.get("split"),
                )
                post.validate()
            except KeyError as e:
                raise DataError(f"{path}: line {lineno}: missing field {e}") from e
            except DataError as e:
                raise DataError(f"{path}: line {lineno}: {e}") from e
            if manifest is not None:
                if post.label not in manifest.classes:
                    raise DataError(f"{path}: line {lineno}: unknown label '{post.label}'")
                unknown = [t for t in post.targets if t not in manifest.targets]
                if unknown:
                    raise DataError(f"{path}: line {lineno}: unknown targets {unknown}")
            counts[post.label] = counts.get(post.label, 0) + 1
            posts.append(post)
    if manifest is not None and manifest.counts and counts != manifest.counts:
        raise DataError(f"{path}: label counts {counts} do not match manifest {manifest.counts}")
    return posts


def write_jsonl(posts: list[TokenizedPost], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for p in posts:
            rec: dict = {"id": p.id, "tokens": p.tokens, "label": p.label, "targets": p.targets}
            if p.annotator_rationales is not None:
                rec["annotator_rationales"] = p.annotator_rationales
            if p.rationale is not None:
                rec["rationale"] = p.rationale
            if p.split is not None:
                rec["split"] = p.split
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


# -- preprocessing --

_URL = re.compile(r"^(https?://|www\.)", re.IGNORECASE)


def _tokenize(raw: str) -> list[str]:
    out = []
    for tok in raw.split():
        if tok.startswith("@") and len(tok) > 1:
            out.append("<user>")
        elif _URL.match(tok):
            out.append("<url>")
        else:
            out.append(tok.lower())
    return out


def normalize_text(raw: str, max_tokens: int = MAX_TOKENS) -> list[str]:
    """Lowercase, replace @-mentions/URLs, whitespace-split, truncate."""
    return _tokenize(raw)[:max_tokens]


def aggregate_ground_truth(masks: list[list[int]], threshold: int = 2) -> list[int]:
    """Position is a rationale iff at least `threshold` annotators marked it."""
    if not masks:
        raise DataError("aggregate_ground_truth needs at least one mask")
    n = len(masks[0])
    if any(len(m) != n for m in masks):
        raise DataError("annotator masks have differing lengths")
    votes = np.sum(np.asarray(masks), axis=0)
    return [int(v >= threshold) for v in votes]


def align_phrase_rationales(text: str, spans: list[tuple[int, int]]) -> list[int]:
    """Token mask from character-level rationale phrase spans.

    The text is cut into rationale / non-rationale phrases, each phrase is
    tokenized on its own, and the per-phrase 1/0 vectors are concatenated.
    The mask therefore aligns with the concatenation of the per-phrase
    tokenizations (identical to tokenizing the whole text when spans respect
    word boundaries).
    """
    spans = sorted((int(s), int(e)) for s, e in spans)
    prev_end = 0
    for s, e in spans:
        if s < prev_end:
            raise DataError(f"rationale spans overlap at character {s}")
        if not (0 <= s < e <= len(text)):
            raise DataError(f"span ({s}, {e}) outside text of length {len(text)}")
        prev_end = e
    mask: list[int] = []
    cursor = 0
    for s, e in spans:
        mask.extend(0 for _ in _tokenize(text[cursor:s]))
        mask.extend(1 for _ in _tokenize(text[s:e]))
        cursor = e
    mask.extend(0 for _ in _tokenize(text[cursor:]))
    return mask


# -- splits and sampling --


@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ContractError("split ratios must be three positive numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ContractError(f"split ratios sum to {sum(self.ratios)}, expected 1")


def _largest_remainder(n: int, ratios) -> list[int]:
    quotas = [n * r for r in ratios]
    alloc = [math.floor(q) for q in quotas]
    leftover = n - sum(alloc)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - alloc[i]), -ratios[i], i))
    for i in order[:leftover]:
        alloc[i] += 1
    return alloc


def make_splits(posts: list[TokenizedPost], spec: SplitSpec) -> list[TokenizedPost]:
    """Tag every post with train/dev/test, stratified by label if requested."""
    rng = np.random.default_rng(spec.seed)
    by_group: dict[str, list[int]] = {}
    if spec.stratified:
        for i, p in enumerate(posts):
            by_group.setdefault(p.label, []).append(i)
    else:
        by_group["*"] = list(range(len(posts)))
    assignment: dict[int, str] = {}
    for group in sorted(by_group):
        idx = np.asarray(by_group[group])
        counts = _largest_remainder(len(idx), spec.ratios)
        if spec.stratified and any(c < 1 for c in counts):
            raise DataError(f"class '{group}' too small for split ratios ({len(idx)} datapoints)")
        idx = idx[rng.permutation(len(idx))]
        cursor = 0
        for split, c in zip(SPLITS, counts):
            for i in idx[cursor : cursor + c]:
                assignment[int(i)] = split
            cursor += c
    return [dataclasses.replace(p, split=assignment[i]) for i, p in enumerate(posts)]


def split_of(posts: list[TokenizedPost], split: str) -> list[TokenizedPost]:
    return [p for p in posts if p.split == split]


def sample_fewshot(train: list[TokenizedPost], k: int, n_sets: int = 5,
                   seed: int = 0) -> list[list[TokenizedPost]]:
    """Draw n_sets independent sets of exactly k posts per label."""
    if k < 0:
        raise ContractError("k must be non-negative")
    by_class: dict[str, list[TokenizedPost]] = {}
    for p in train:
        by_class.setdefault(p.label, []).append(p)
    for cls, pool in sorted(by_class.items()):
        if len(pool) < k:
            raise DataError(f"class '{cls}' has only {len(pool)} training posts, need {k}")
    rng = np.random.default_rng(seed)
    sets: list[list[TokenizedPost]] = []
    for _ in range(n_sets):
        chosen: list[TokenizedPost] = []
        for cls in sorted(by_class):
            pool = by_class[cls]
            pick = rng.permutation(len(pool))[:k]
            chosen.extend(pool[i] for i in pick)
        sets.append(chosen)
    return sets


def relabel(posts: list[TokenizedPost], mapping: dict[str, str]) -> list[TokenizedPost]:
    """Collapse label sets, e.g. {hate speech, offensive} -> toxic."""
    out = []
    for p in posts:
        if p.label not in mapping:
            raise DataError(f"post {p.id}: label '{p.label}' missing from mapping")
        out.append(dataclasses.replace(p, label=mapping[p.label]))
    return out


# -- term distributions --


@dataclass
class TermDistribution:
    freqs: dict[str, float]

    def __post_init__(self):
        total = sum(self.freqs.values())
        if self.freqs and abs(total - 1.0) > 1e-9:
            raise ContractError(f"term frequencies sum to {total}, expected 1")


def term_distribution(posts: list[TokenizedPost]) -> TermDistribution:
    counts: dict[str, int] = {}
    total = 0
    for p in posts:
        for t in p.tokens:
            counts[t] = counts.get(t, 0) + 1
            total += 1
    if total == 0:
        raise DataError("term_distribution of an empty corpus")
    return TermDistribution({t: c / total for t, c in counts.items()})


def cosine_similarity(d1: TermDistribution, d2: TermDistribution) -> float:
    n1 = math.sqrt(sum(v * v for v in d1.freqs.values()))
    n2 = math.sqrt(sum(v * v for v in d2.freqs.values()))
    if n1 == 0 or n2 == 0:
        raise DataError("cosine similarity of a zero distribution")
    dot = sum(v * d2.freqs.get(t, 0.0) for t, v in d1.freqs.items())
    return dot / (n1 * n2)


# -- synthetic corpus generation --


@dataclass
class GenConfig:
    """Knobs for the planted-rationale synthetic corpus."""

    dataset_id: str = "syn"
    n_posts: int = 1000
    background_size: int = 800
    n_lexicon: int = 40
    n_markers: int = 8
    class_priors: dict[str, float] = field(default_factory=lambda: {"abusive": 0.5, "normal": 0.5})
    abusive_classes: tuple[str, ...] = ("abusive",)
    length_range: tuple[int, int] = (8, 20)
    lexicon_per_post: tuple[int, int] = (1, 3)
    markers_per_post: tuple[int, int] = (1, 2)
    shift_rate: float = 0.0
    lexicon_in_normal_rate: float = 0.0
    n_annotators: int = 0
    annotator_miss_rate: float = 0.2
    annotator_add_rate: float = 0.02
    background_tokens: list[str] | None = None
    lexicon_tokens: list[str] | None = None
    marker_tokens: list[str] | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        kwargs = dict(d)
        for key in ("length_range", "lexicon_per_post", "markers_per_post", "abusive_classes"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def generate_synthetic(config: GenConfig, seed: int) -> tuple[list[TokenizedPost], DatasetManifest]:
    """Sample a corpus with planted rationales; optionally vocabulary-shifted.

    Abusive posts carry 1+ lexicon tokens whose positions form the ground
    truth mask, plus marker tokens that define the target set. The shift is
    applied after sampling as a type-level substitution on background
    vocabulary, so two runs with the same seed and different shift rates
    describe the same posts up to renamed background types (rate 0 gives a
    term distribution identical to the unshifted corpus).
    """
    background = config.background_tokens or [f"w{i:03d}" for i in range(config.background_size)]
    lexicon = config.lexicon_tokens or [f"bad{i:02d}" for i in range(config.n_lexicon)]
    markers = config.marker_tokens or [f"grp{i}" for i in range(config.n_markers)]
    if set(lexicon) & set(background):
        raise DataError("lexicon and background vocabularies must be disjoint")
    if set(markers) & (set(background) | set(lexicon)):
        raise DataError("marker tokens must be disjoint from other vocabularies")
    priors = config.class_priors
    classes = list(priors)
    probs = np.asarray([priors[c] for c in classes], dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-9 or (probs < 0).any():
        raise DataError("class priors must be a probability distribution")
    lo, hi = config.length_range
    if lo < 4:
        raise DataError("minimum post length must be at least 4")

    rng = np.random.default_rng([seed, 17])
    posts: list[TokenizedPost] = []
    counts = {c: 0 for c in classes}
    for i in range(config.n_posts):
        label = classes[int(rng.choice(len(classes), p=probs))]
        length = int(rng.integers(lo, hi + 1))
        tokens = [background[j] for j in rng.integers(0, len(background), length)]
        mask = [0] * length
        targets: list[str] = []
        if label in config.abusive_classes:
            n_lex = min(int(rng.integers(config.lexicon_per_post[0], config.lexicon_per_post[1] + 1)), length - 2)
            lex_pos = rng.choice(length, n_lex, replace=False)
            for p in lex_pos:
                tokens[p] = lexicon[int(rng.integers(len(lexicon)))]
                mask[p] = 1
            free = [j for j in range(length) if mask[j] == 0]
            n_mark = min(int(rng.integers(config.markers_per_post[0], config.markers_per_post[1] + 1)), len(free))
            mark_pos = rng.choice(len(free), n_mark, replace=False)
            chosen = set()
            for mp in mark_pos:
                m = markers[int(rng.integers(len(markers)))]
                tokens[free[mp]] = m
                chosen.add(m)
            targets = sorted(chosen)
        elif config.lexicon_in_normal_rate > 0 and rng.random() < config.lexicon_in_normal_rate:
            p = int(rng.integers(length))
            tokens[p] = lexicon[int(rng.integers(len(lexicon)))]

        annot = None
        if config.n_annotators > 0:
            annot = []
            for _ in range(config.n_annotators):
                am = []
                for j in range(length):
                    if mask[j]:
                        am.append(0 if rng.random() < config.annotator_miss_rate else 1)
                    else:
                        am.append(1 if rng.random() < config.annotator_add_rate else 0)
                annot.append(am)

        counts[label] += 1
        posts.append(TokenizedPost(
            id=f"{config.dataset_id}-{i:05d}",
            tokens=tokens,
            label=label,
            targets=targets,
            annotator_rationales=annot,
            rationale=mask,
            dataset_id=config.dataset_id,
        ))

    if config.shift_rate > 0:
        rng_shift = np.random.default_rng([seed, 91])
        n_sub = int(round(config.shift_rate * len(background)))
        subbed = rng_shift.choice(len(background), n_sub, replace=False)
        table = {background[j]: f"x{j:03d}" for j in subbed}
        for p in posts:
            p.tokens = [table.get(t, t) for t in p.tokens]

    manifest = DatasetManifest(
        dataset_id=config.dataset_id,
        classes=classes,
        targets=list(markers),
        counts=counts,
    )
    return posts, manifest


def simulate_random_rationales(posts: list[TokenizedPost], seed: int) -> list[list[int]]:
    """Uniform random index sets matching each post's ground-truth cardinality."""
    rng = np.random.default_rng(seed)
    out = []
    for p in posts:
        if p.rationale is None:
            raise DataError(f"post {p.id} lacks a ground-truth rationale mask")
        n = len(p.tokens)
        c = int(sum(p.rationale))
        mask = [0] * n
        if c:
            for j in rng.choice(n, c, replace=False):
                mask[int(j)] = 1
        out.append(mask)
    return out
