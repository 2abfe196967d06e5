"""raftlab: a desk-scale lab for rationale-gated few-shot abuse classification.

Subpackages:
  autodiff    dense tensors, reverse-mode gradients, Adam
  checkpoint  versioned binary parameter files
  encoder     toy transformer encoder and whitespace tokenizer
  multitask   rationale/label/target extractor and its joint loss
  adapters    rationale-gated classifiers and the label-only baseline
  explain     occlusion and local-surrogate importances
  metrics     classification, plausibility, faithfulness, agreement
  corpus      JSONL ingestion, splits, synthetic corpora, similarity
  harness     few-shot protocol, ablation, sweeps, report emission
"""

from .autodiff import Adam, Tensor
from .checkpoint import Checkpoint
from .errors import ContractError, DataError, NonFiniteError, RaftLabError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Checkpoint",
    "ContractError",
    "DataError",
    "NonFiniteError",
    "RaftLabError",
    "ShapeError",
    "Tensor",
    "__version__",
]
