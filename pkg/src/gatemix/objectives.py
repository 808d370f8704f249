"""Alignment-stage losses.

Two pieces: token cross-entropy over readout logits, and a contrastive
regulariser over batch-pooled image/text representations,

    L = -(1/2b) * sum_i [ log(S_ii / sum_j S_ji) + log(S_ii / sum_j S_ij) ],

where S holds pairwise similarities between pooled image rows and pooled
text rows. Raw cosine can be negative or zero, which leaves the logs
undefined, so the default similarity is exp(cos/tau) (always positive);
raw cosine stays available behind an explicit mode flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DegenerateVectorError,
    ShapeError,
    Tensor,
    matmul,
)

__all__ = [
    "InvalidSimilarityError",
    "BatchRepresentations",
    "SimilarityMatrix",
    "similarity_matrix",
    "creg_loss",
    "generation_loss",
    "stage1_objective",
]

MODES = ("exp-cosine", "raw-cosine")


class InvalidSimilarityError(ValueError):
    """Similarity entries unusable for the contrastive loss."""


@dataclass
class BatchRepresentations:
    """Pooled per-item representations: img and txt are both b x d_llm."""

    img: Tensor
    txt: Tensor

    def __post_init__(self):
        if self.img.ndim != 2 or self.txt.ndim != 2:
            raise ShapeError("batch representations must be rank 2")
        if self.img.shape != self.txt.shape:
            raise ShapeError(
                f"img/txt representation shapes differ: {self.img.shape} vs {self.txt.shape}"
            )

    @property
    def b(self) -> int:
        return self.img.shape[0]


@dataclass
class SimilarityMatrix:
    """b x b similarity values plus the mode/temperature that produced them."""

    S: Tensor
    mode: str = "exp-cosine"
    tau: float = 1.0


def _row_norms(x: Tensor) -> Tensor:
    return (x * x).sum(axis=1).sqrt()


def similarity_matrix(
    reps: BatchRepresentations, mode: str = "exp-cosine", tau: float = 1.0
) -> SimilarityMatrix:
    """Pairwise similarities S_ij between img row i and txt row j.

    exp-cosine (default): S_ij = exp(cos(img_i, txt_j) / tau), strictly
    positive. raw-cosine: the cosines themselves. Differentiable end to end.
    """
    if mode not in MODES:
        raise ValueError(f"similarity mode must be one of {MODES}, got {mode!r}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    for name, t in (("img", reps.img), ("txt", reps.txt)):
        if np.any((t.data * t.data).sum(axis=1) == 0.0):
            raise DegenerateVectorError(f"similarity_matrix: zero-norm {name} row")
    b = reps.b
    dots = matmul(reps.img, reps.txt.transpose())                    # b x b
    denom = matmul(
        _row_norms(reps.img).reshape((b, 1)),
        _row_norms(reps.txt).reshape((1, b)),
    )
    cos = dots / denom
    if mode == "raw-cosine":
        return SimilarityMatrix(S=cos, mode=mode, tau=tau)
    return SimilarityMatrix(S=(cos / tau).exp(), mode=mode, tau=tau)


def creg_loss(sm: SimilarityMatrix) -> Tensor:
    """Contrastive regulariser over a square similarity matrix.

    Pulls each diagonal entry up against its row and column totals; zero at
    b=1 and non-negative whenever all entries are positive.
    """
    S = sm.S
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"creg_loss: similarity matrix must be square, got {S.shape}")
    if np.any(S.data <= 0.0):
        raise InvalidSimilarityError(
            "creg_loss: non-positive similarity entries; use the exp-cosine mode"
        )
    b = S.shape[0]
    eye = Tensor(np.eye(b))
    diag = (S * eye).sum(axis=1)      # (b,)
    col_sums = S.sum(axis=0)          # sum_j S_ji for each i
    row_sums = S.sum(axis=1)          # sum_j S_ij for each i
    terms = (diag.log() - col_sums.log()) + (diag.log() - row_sums.log())
    return terms.sum() * (-1.0 / (2.0 * b))


def generation_loss(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax probability of the target ids.

    ``logits`` is T x V; ``targets`` holds T integer ids below V. The
    log-sum-exp is computed with a constant per-row shift, so gradients are
    exact.
    """
    if logits.ndim != 2:
        raise ShapeError(f"generation_loss: logits must be rank 2, got {logits.shape}")
    t_count, vocab = logits.shape
    ids = list(targets)
    if len(ids) != t_count:
        raise ShapeError(
            f"generation_loss: {len(ids)} targets for {t_count} logit rows"
        )
    for tid in ids:
        if not (0 <= int(tid) < vocab):
            raise ValueError(f"generation_loss: target id {tid} out of range for vocab {vocab}")
    onehot = np.zeros((t_count, vocab))
    onehot[np.arange(t_count), np.asarray(ids, dtype=int)] = 1.0
    picked = (logits * Tensor(onehot)).sum(axis=1)                    # (T,)
    row_max = logits.data.max(axis=1, keepdims=True)                  # constant shift
    lse = (logits - Tensor(row_max)).exp().sum(axis=1).log() + Tensor(row_max.reshape(-1))
    return (lse - picked).mean()


def stage1_objective(gen: Tensor, creg: Tensor, lam: float = 1.0) -> Tensor:
    """Combined alignment loss: generation term plus lam times the
    contrastive term. The combination weight defaults to 1."""
    if lam < 0:
        raise ValueError(f"stage1_objective: lambda must be >= 0, got {lam}")
    return gen + creg * lam
