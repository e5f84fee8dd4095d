"""Connectionist temporal classification loss.

Log-space forward dynamic program over the blank-extended target sequence.
Written against torch tensors so gradients flow through autograd.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch

NINF = -1e30


def ctc_loss(log_probs: torch.Tensor, target: Sequence[int], blank: int) -> torch.Tensor:
    """-log P(target | frame posteriors), summed over all CTC alignments.

    `log_probs` is (T, C) of per-frame log posteriors including the blank
    class. Targets longer than any feasible alignment yield +inf (flagged to
    the caller through isinf rather than an exception).
    """
    T, C = log_probs.shape
    labels = list(target)
    if any(not 0 <= l < C for l in labels) or not 0 <= blank < C:
        raise ValueError("target/blank index out of range")
    if any(l == blank for l in labels):
        raise ValueError("target must not contain the blank index")
    L = len(labels)
    min_frames = L + sum(1 for i in range(1, L) if labels[i] == labels[i - 1])
    if T < min_frames:
        return log_probs.new_tensor(math.inf)
    if L == 0:
        return -log_probs[:, blank].sum()

    # extended sequence: blank, l1, blank, l2, ..., lL, blank
    ext = [blank]
    for l in labels:
        ext += [l, blank]
    S = len(ext)
    ext_t = torch.tensor(ext, dtype=torch.long)

    # skip transition is illegal into blanks and into repeated labels
    skip_ok = torch.ones(S, dtype=torch.bool)
    skip_ok[:2] = False
    for s in range(2, S):
        if ext[s] == blank or ext[s] == ext[s - 2]:
            skip_ok[s] = False

    alpha = log_probs.new_full((S,), NINF)
    alpha[0] = log_probs[0, blank]
    alpha[1] = log_probs[0, ext[1]]
    for t in range(1, T):
        stay = alpha
        prev1 = torch.cat([alpha.new_full((1,), NINF), alpha[:-1]])
        prev2 = torch.cat([alpha.new_full((2,), NINF), alpha[:-2]])
        prev2 = torch.where(skip_ok, prev2, prev2.new_full((S,), NINF))
        alpha = torch.logsumexp(torch.stack([stay, prev1, prev2]), dim=0) + log_probs[t, ext_t]
    total = torch.logsumexp(torch.stack([alpha[-1], alpha[-2]]), dim=0)
    return -total


def ctc_loss_batch(log_probs: torch.Tensor, lengths: Sequence[int],
                   targets: Sequence[Sequence[int]], blank: int) -> torch.Tensor:
    """Mean CTC loss over a padded batch; infeasible pairs are skipped."""
    losses = []
    for b, target in enumerate(targets):
        loss = ctc_loss(log_probs[b, : lengths[b]], target, blank)
        if not torch.isinf(loss):
            losses.append(loss)
    if not losses:
        return log_probs.new_tensor(0.0)
    return torch.stack(losses).mean()
