"""Post-hoc token-importance explainers and score utilities.

Both explainers treat the model as a black box mapping token sequences to
class probabilities. Token removal means deleting the token and closing the
gap, mirroring how contrastive examples are built for the faithfulness
metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .metrics import Predictor


@dataclass
class ImportanceVector:
    """Per-token scores aligned to a post, tagged with the producing method."""

    scores: np.ndarray
    method: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ContractError("importance scores must be a 1-D vector")


def occlusion_importances(predictor: Predictor, tokens: list[str], class_j: int) -> ImportanceVector:
    """score[t] = p(full, j) - p(post without token t, j)."""
    full = float(predictor(list(tokens))[class_j])
    scores = np.empty(len(tokens))
    for t in range(len(tokens)):
        reduced = list(tokens[:t]) + list(tokens[t + 1 :])
        scores[t] = full - float(predictor(reduced)[class_j])
    return ImportanceVector(scores, "occlusion")


def surrogate_importances(predictor: Predictor, tokens: list[str], class_j: int,
                          n_samples: int = 200, seed: int = 0,
                          ridge_lambda: float = 1e-3, kernel_width: float = 0.25,
                          exhaustive: bool = False) -> ImportanceVector:
    """Local linear surrogate fit to masked perturbations of the post.

    Each perturbation keeps every token independently with probability 0.5;
    the predicted probability of class j is regressed on the binary presence
    vector with a ridge penalty, weighting samples by an exponential kernel
    on cosine similarity to the unperturbed post. Coefficients are the
    importances. exhaustive=True enumerates all 2^T presence vectors instead
    of sampling (only sensible for short posts).
    """
    t = len(tokens)
    if t == 0:
        raise ContractError("cannot explain an empty post")
    if exhaustive:
        if t > 16:
            raise ContractError(f"exhaustive enumeration infeasible for {t} tokens")
        z = np.array([[(i >> b) & 1 for b in range(t)] for i in range(2**t)], dtype=np.float64)
    else:
        if n_samples < 2 * t:
            raise ContractError(f"n_samples={n_samples} below required 2*T={2 * t}")
        rng = np.random.default_rng(seed)
        z = (rng.random((n_samples, t)) < 0.5).astype(np.float64)

    y = np.empty(z.shape[0])
    for i, row in enumerate(z):
        kept = [tok for tok, keep in zip(tokens, row) if keep]
        y[i] = float(predictor(kept)[class_j])

    # cosine similarity of each presence vector to the all-ones vector
    sizes = z.sum(axis=1)
    cos = np.sqrt(sizes / t)
    dist = 1.0 - cos
    w = np.exp(-(dist**2) / kernel_width**2)

    # weighted ridge with an unpenalized intercept
    x = np.concatenate([np.ones((z.shape[0], 1)), z], axis=1)
    xtw = x.T * w
    a = xtw @ x
    reg = np.eye(t + 1) * ridge_lambda
    reg[0, 0] = 0.0
    coef = np.linalg.solve(a + reg, xtw @ y)
    return ImportanceVector(coef[1:], "surrogate")


def minmax_normalize(scores) -> np.ndarray:
    """Rescale to [0, 1]; an all-equal vector maps to all 0.5."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ContractError("cannot normalize an empty score vector")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full_like(s, 0.5)
    return (s - lo) / (hi - lo)


def top_k_rationales(scores, k: int = 5) -> list[int]:
    """Indices of the k highest scores; ties prefer the lower index."""
    if k < 1:
        raise ContractError("k must be at least 1")
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    return sorted(int(i) for i in order[: min(k, s.size)])
