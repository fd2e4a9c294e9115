"""Transducer objective: forward-backward over the T x (U+1) lattice.

The lattice is always accumulated in 64-bit log domain regardless of the
activation dtype. Gradients w.r.t. the log-probability tensor are exact,
via alpha/beta transition occupancies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch

from .errors import ImpossibleAlignment, InvalidLabel

NEG_INF = float("-inf")


def logadd(a: float, b: float) -> float:
    """log(exp(a) + exp(b)) via max shift; tolerates -inf."""
    return float(np.logaddexp(a, b))


@dataclass
class LossLattice:
    log_alpha: np.ndarray          # (T, U+1)
    log_beta: np.ndarray           # (T, U+1)
    log_probs: np.ndarray          # (T, U+1, V)
    labels: np.ndarray             # (U,)
    blank_index: int
    log_likelihood: float

    @property
    def forward_total(self) -> float:
        t, u = self.log_alpha.shape[0] - 1, self.log_alpha.shape[1] - 1
        return float(self.log_alpha[t, u] + self.log_probs[t, u, self.blank_index])

    @property
    def backward_total(self) -> float:
        return float(self.log_beta[0, 0])


def _validate(log_probs: np.ndarray, labels: np.ndarray, blank: int) -> None:
    if log_probs.ndim != 3:
        raise ValueError("log_probs must be (T, U+1, V)")
    t, u_rows, v = log_probs.shape
    if t < 1:
        if labels.size > 0:
            raise ImpossibleAlignment("labels cannot be emitted with no frames")
        raise ImpossibleAlignment("empty lattice")
    if u_rows != labels.size + 1:
        raise ValueError("log_probs rows must be len(labels) + 1")
    if not (0 <= blank < v):
        raise InvalidLabel(f"blank index {blank} outside vocabulary of {v}")
    if labels.size:
        if labels.min() < 0 or labels.max() >= v:
            raise InvalidLabel("label id outside vocabulary")
        if np.any(labels == blank):
            raise InvalidLabel("labels must not contain the blank")


def transducer_loss(
    log_probs: np.ndarray,
    labels: Sequence[int],
    blank: int = 0,
) -> Tuple[float, np.ndarray]:
    """Negative log-likelihood over all alignments, plus its exact gradient."""
    loss, grad, _ = transducer_loss_with_lattice(log_probs, labels, blank)
    return loss, grad


def transducer_loss_with_lattice(
    log_probs: np.ndarray,
    labels: Sequence[int],
    blank: int = 0,
) -> Tuple[float, np.ndarray, LossLattice]:
    lp = np.asarray(log_probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _validate(lp, y, blank)
    t_len, u_rows, _ = lp.shape
    u_len = y.size

    lp_blank = lp[:, :, blank]                       # (T, U+1)
    if u_len:
        lp_label = lp[:, np.arange(u_len), y]        # (T, U): emit y[u] from row u
    else:
        lp_label = np.zeros((t_len, 0))

    # NaNs from diverged upstream activations propagate to the loss value,
    # where the trainer's divergence guard picks them up.
    with np.errstate(invalid="ignore"):
        alpha = np.full((t_len, u_rows), NEG_INF)
        alpha[0, 0] = 0.0
        for u in range(1, u_rows):
            alpha[0, u] = alpha[0, u - 1] + lp_label[0, u - 1]
        for t in range(1, t_len):
            alpha[t, 0] = alpha[t - 1, 0] + lp_blank[t - 1, 0]
            for u in range(1, u_rows):
                alpha[t, u] = np.logaddexp(
                    alpha[t - 1, u] + lp_blank[t - 1, u],
                    alpha[t, u - 1] + lp_label[t, u - 1],
                )

        # beta[t, u]: log-mass of completions from (t, u), final blank included.
        beta = np.full((t_len, u_rows), NEG_INF)
        beta[t_len - 1, u_len] = lp_blank[t_len - 1, u_len]
        for u in range(u_len - 1, -1, -1):
            beta[t_len - 1, u] = beta[t_len - 1, u + 1] + lp_label[t_len - 1, u]
        for t in range(t_len - 2, -1, -1):
            beta[t, u_len] = beta[t + 1, u_len] + lp_blank[t, u_len]
            for u in range(u_len - 1, -1, -1):
                beta[t, u] = np.logaddexp(
                    beta[t + 1, u] + lp_blank[t, u],
                    beta[t, u + 1] + lp_label[t, u],
                )

        log_like = float(beta[0, 0])

        # Occupancy of each transition: gamma = alpha * edge * continuation / P.
        grad = np.zeros_like(lp)
        # blank edges move (t, u) -> (t+1, u); from the last frame only u = U ends.
        cont_blank = np.full((t_len, u_rows), NEG_INF)
        if t_len > 1:
            cont_blank[: t_len - 1] = beta[1:]
        cont_blank[t_len - 1, u_len] = 0.0
        occ_blank = np.exp(alpha + lp_blank + cont_blank - log_like)
        grad[:, :, blank] = -occ_blank
        # label edges move (t, u) -> (t, u+1).
        for u in range(u_len):
            occ = np.exp(alpha[:, u] + lp_label[:, u] + beta[:, u + 1] - log_like)
            grad[:, u, y[u]] -= occ

    lattice = LossLattice(
        log_alpha=alpha,
        log_beta=beta,
        log_probs=lp,
        labels=y,
        blank_index=blank,
        log_likelihood=log_like,
    )
    return -log_like, grad, lattice


def blank_occupancy_per_frame(lattice: LossLattice) -> np.ndarray:
    """Posterior mass of the frame-advancing blank, per frame (sums to 1)."""
    t_len, u_rows = lattice.log_alpha.shape
    u_len = u_rows - 1
    lp_blank = lattice.log_probs[:, :, lattice.blank_index]
    cont = np.full((t_len, u_rows), NEG_INF)
    if t_len > 1:
        cont[: t_len - 1] = lattice.log_beta[1:]
    cont[t_len - 1, u_len] = 0.0
    occ = np.exp(lattice.log_alpha + lp_blank + cont - lattice.log_likelihood)
    return occ.sum(axis=1)


def label_occupancy_per_row(lattice: LossLattice) -> np.ndarray:
    """Posterior mass of each label emission, per label (each sums to 1)."""
    u_len = lattice.labels.size
    out = np.zeros(u_len)
    for u in range(u_len):
        occ = np.exp(
            lattice.log_alpha[:, u]
            + lattice.log_probs[:, u, lattice.labels[u]]
            + lattice.log_beta[:, u + 1]
            - lattice.log_likelihood
        )
        out[u] = occ.sum()
    return out


class _TransducerLossFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs: torch.Tensor, labels: torch.Tensor, blank: int):
        loss, grad = transducer_loss(
            log_probs.detach().cpu().numpy(), labels.detach().cpu().numpy(), blank
        )
        ctx.save_for_backward(
            torch.from_numpy(grad).to(dtype=log_probs.dtype, device=log_probs.device)
        )
        return log_probs.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_output):
        (grad,) = ctx.saved_tensors
        return grad_output * grad, None, None


def transducer_loss_torch(
    log_probs: torch.Tensor, labels: Sequence[int], blank: int = 0
) -> torch.Tensor:
    """Differentiable loss on a (T, U+1, V) log-softmax tensor."""
    labels_t = torch.as_tensor(labels, dtype=torch.int64)
    return _TransducerLossFn.apply(log_probs, labels_t, blank)
