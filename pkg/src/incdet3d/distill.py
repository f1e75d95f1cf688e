"""Knowledge-retention losses between the current and previous detector.

Three pieces: a statistically thresholded box-consistency term that only
trusts confident old-class proposals, a pairwise feature-relation term that
preserves similarity structure among the proposals of a scene, and a
softened score alignment over the columns the previous detector knew about.
Teacher-side inputs are plain arrays, so no gradient can reach the frozen
detector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, InputError


@dataclass
class ReliableSelection:
    """Outcome of the confidence filter over one proposal table."""

    tau: float
    indices: np.ndarray   # proposals whose peak score strictly clears tau
    mu: float
    sigma: float

    def count(self) -> int:
        return int(self.indices.shape[0])


def compute_threshold(class_scores: np.ndarray, old_class_ids, zeta: float) -> ReliableSelection:
    """Pick proposals whose peak score clears a mean + zeta * sigma bar.

    class_scores is the (K, C_total) score table. Only proposals whose argmax
    lands in an old-class column enter the pool; mu and sigma are that pool's
    mean and population spread, and the comparison is strict, so an all-equal
    pool selects nothing. An empty pool yields tau = inf and no selection.
    """
    scores = np.asarray(class_scores, dtype=np.float64)
    if scores.ndim != 2:
        raise DimensionError("class scores must be a (K, C) table")
    old = np.asarray(sorted(set(int(c) for c in old_class_ids)), dtype=np.int64)
    if old.size and (old.min() < 0 or old.max() >= scores.shape[1]):
        raise InputError("old class id outside the score table")
    empty = ReliableSelection(tau=np.inf, indices=np.empty(0, dtype=np.int64),
                              mu=0.0, sigma=0.0)
    if old.size == 0:
        return empty
    peak_class = np.argmax(scores, axis=1)
    pool = np.nonzero(np.isin(peak_class, old))[0]
    if pool.size == 0:
        return empty
    peak = scores[pool, peak_class[pool]]
    mu = float(np.mean(peak))
    sigma = float(np.sqrt(np.mean((peak - mu) ** 2)))
    tau = mu + zeta * sigma
    return ReliableSelection(tau=tau, indices=pool[peak > tau].astype(np.int64),
                             mu=mu, sigma=sigma)


def rdd_loss(student_boxes: Tensor, teacher_boxes: np.ndarray,
             selection: ReliableSelection, squared: bool = True) -> Tensor:
    """Box agreement on the selected proposals, averaged over the selection.

    squared=True uses the squared distance per proposal (smooth everywhere);
    squared=False takes the literal euclidean distance, with a tiny floor
    inside the root so an exact match cannot blow up the gradient.
    """
    idx = np.asarray(selection.indices, dtype=np.int64)
    teacher = np.asarray(teacher_boxes, dtype=np.float64)
    if student_boxes.data.shape != teacher.shape:
        raise DimensionError("student and teacher box tables must match")
    if idx.size == 0:
        return Tensor(np.float64(0.0))
    diff = ad.sub(ad.take_rows(student_boxes, idx), Tensor(teacher[idx]))
    if squared:
        return ad.mul(ad.sq_l2_sum(diff), 1.0 / idx.size)
    row_sq = ad.sum_(ad.mul(diff, diff), axis=1)
    dist = ad.sqrt_(ad.add(row_sq, 1e-24))
    return ad.mean_(dist)


def _pairs(n: int, cap: int):
    out = []
    for i in range(n):
        for j in range(i + 1, n):
            out.append((i, j))
            if len(out) >= cap:
                return out
    return out


def _np_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.sqrt(a @ a))
    nb = float(np.sqrt(b @ b))
    if na * nb < 1e-12:
        return 0.0
    return float(a @ b) / (na * nb)


def rfd_loss(student_features: Tensor, teacher_features: np.ndarray,
             max_pairs: int = 1024) -> Tensor:
    """Match the pairwise cosine structure of two proposal feature tables.

    Both tables are (K, D), rows aligned by proposal index. The squared gap
    between corresponding cosines is averaged over the compared pairs; a cap
    bounds the pair count for large K. Fewer than two rows leaves nothing to
    relate, giving a zero loss.
    """
    teacher = np.asarray(teacher_features, dtype=np.float64)
    if student_features.data.shape != teacher.shape:
        raise DimensionError("student and teacher feature tables must match")
    n = student_features.data.shape[0]
    if n < 2:
        return Tensor(np.float64(0.0))
    rows = [ad.take_rows(student_features, np.array([i])) for i in range(n)]
    flat = [ad.reshape(r, (teacher.shape[1],)) for r in rows]
    pairs = _pairs(n, max_pairs)
    total = None
    for i, j in pairs:
        cos_new = ad.cosine_similarity(flat[i], flat[j])
        cos_old = _np_cosine(teacher[i], teacher[j])
        gap = ad.sub(cos_new, cos_old)
        term = ad.mul(gap, gap)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(pairs))


def logit_distillation_loss(student_logits: Tensor, teacher_logits: np.ndarray,
                            temperature: float = 1.0, rows=None,
                            pad: bool = True) -> Tensor:
    """Softened score alignment against the old detector's class beliefs.

    The student table is wider after expansion. With pad on, the teacher's
    softened distribution is extended with zero mass over the added columns
    and the divergence is taken against the student's softmax over the full
    width, so probability the student moves into a new column is penalized
    rather than silently renormalized away: where the teacher put all its
    bets is preserved, where it put none, none may appear. With pad off the
    student table is cut back to the teacher's columns and only their
    relative balance is aligned, leaving the new columns free.

    rows, when given, limits the alignment to those proposals (labeled
    positives of the running task carry their own supervision and are
    typically left out). With no old classes there is nothing to align.
    """
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if teacher.ndim != 2:
        raise DimensionError("teacher logits must be a (K, C_old) table")
    c_old = teacher.shape[1]
    if c_old == 0:
        return Tensor(np.float64(0.0))
    if student_logits.data.shape[0] != teacher.shape[0]:
        raise DimensionError("student and teacher must score the same proposals")
    c_new = student_logits.data.shape[1] - c_old
    if c_new < 0:
        raise DimensionError("student score table narrower than the teacher's")
    student = student_logits
    if rows is not None:
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            return Tensor(np.float64(0.0))
        student = ad.take_rows(student_logits, rows)
        teacher = teacher[rows]
    if c_new and pad:
        teacher = np.concatenate(
            [teacher, np.full((teacher.shape[0], c_new), -np.inf)], axis=1)
    elif c_new:
        student = ad.take_cols(student, np.arange(c_old))
    return ad.kl_softened(student, teacher, temperature)
