"""Shared test helpers: the finite-difference gradient oracle and tiny
model/corpus builders used across test modules."""

from __future__ import annotations

import numpy as np
import pytest

from raftlab.autodiff import Tensor
from raftlab.corpus import GenConfig, SplitSpec, generate_synthetic, make_splits


def finite_difference_grads(f, tensors: dict[str, Tensor], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradients of the scalar f() w.r.t. each tensor.

    Perturbs tensor data in place; f must rebuild its forward pass on every
    call so it sees the perturbed values.
    """
    grads = {}
    for name, t in tensors.items():
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def assert_gradcheck(build_loss, params: dict[str, Tensor], rtol: float = 1e-4,
                     h: float = 1e-5) -> None:
    """Analytic vs central-difference gradients, elementwise relative error.

    build_loss() constructs the graph and returns the scalar loss Tensor.
    Everything should be float64 for the tolerance to be meaningful.
    """
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    assert loss.data.dtype == np.float64, "gradcheck must run in double precision"
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    numeric = finite_difference_grads(lambda: build_loss().item(), params, h=h)
    for name in params:
        err = np.abs(analytic[name] - numeric[name]) / np.maximum(1.0, np.abs(numeric[name]))
        assert err.max() <= rtol, (
            f"gradient mismatch for '{name}': max rel err {err.max():.3e} "
            f"(analytic {analytic[name].ravel()[:4]}, numeric {numeric[name].ravel()[:4]})"
        )


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small planted-rationale corpus with splits, shared across tests."""
    cfg = GenConfig(dataset_id="tiny", n_posts=160, background_size=60, n_lexicon=8,
                    n_markers=3, length_range=(6, 12), lexicon_per_post=(1, 2))
    posts, manifest = generate_synthetic(cfg, seed=404)
    posts = make_splits(posts, SplitSpec(ratios=(0.7, 0.15, 0.15), seed=404))
    return posts, manifest
