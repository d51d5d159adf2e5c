"""Training objectives.

Contrastive terms follow the standard InfoNCE form (negative log of the
positive softmax mass, temperature on every similarity); embeddings are
L2-normalized internally so every loss is invariant to positive rescaling of
its raw inputs. All functions preserve the input dtype, which the gradient
and oracle test suites exploit at float64.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .config import LossConfig
from .synthgen import IGNORE_ID


class BatchError(ValueError):
    """Batch composition cannot support the requested loss."""


def _normalize(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1, eps=1e-12)


def clip_pair_loss(image_embeds: torch.Tensor, text_embeds: torch.Tensor,
                   identities: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Supervised two-directional contrastive pair loss.

    One text entry per batch item; for each anchor the log-softmax mass is
    averaged over every same-identity candidate.
    """
    if torch.unique(identities).numel() < 2:
        raise BatchError("clip_pair_loss needs >= 2 identities in the batch")
    img = _normalize(image_embeds)
    txt = _normalize(text_embeds)
    logits = img @ txt.T / temperature
    pos = identities.unsqueeze(0) == identities.unsqueeze(1)

    def direction(lg):
        logp = F.log_softmax(lg, dim=1)
        per_anchor = -(logp * pos).sum(dim=1) / pos.sum(dim=1)
        return per_anchor.mean()

    return direction(logits) + direction(logits.T)


def smoothed_cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                           label_smoothing: float) -> torch.Tensor:
    """CE against q_y = 1-eps+eps/N, q_other = eps/N; mean over the batch."""
    n = logits.shape[1]
    if ((targets < 0) | (targets >= n)).any():
        raise BatchError(f"target identity out of range [0, {n})")
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, targets.unsqueeze(1)).squeeze(1)
    uniform = -logp.mean(dim=1)
    return ((1.0 - label_smoothing) * nll + label_smoothing * uniform).mean()


def image_text_ce(image_embeds: torch.Tensor, identity_texts: torch.Tensor,
                  targets: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Image-to-text cross-entropy over the full identity text bank."""
    if identity_texts.shape[0] < 2:
        raise BatchError("image_text_ce needs >= 2 identity texts")
    logits = cfg.logit_scale * (_normalize(image_embeds) @ _normalize(identity_texts).T)
    return smoothed_cross_entropy(logits, targets, cfg.label_smoothing)


def identity_ce(logits: torch.Tensor, targets: torch.Tensor,
                label_smoothing: float) -> torch.Tensor:
    """Identity classification loss on learned classifier logits."""
    return smoothed_cross_entropy(logits, targets, label_smoothing)


def triplet_batch_hard(embeds: torch.Tensor, identities: torch.Tensor,
                       margin: float = 0.3) -> torch.Tensor:
    """Hardest-positive / hardest-negative hinge on normalized Euclidean distances."""
    x = _normalize(embeds)
    diff = x.unsqueeze(1) - x.unsqueeze(0)
    dist = torch.sqrt(diff.pow(2).sum(dim=-1) + 1e-12)
    same = identities.unsqueeze(0) == identities.unsqueeze(1)
    eye = torch.eye(len(identities), dtype=torch.bool, device=x.device)
    pos = same & ~eye
    neg = ~same
    if not bool(pos.any(dim=1).all()):
        raise BatchError("unmineable batch: some anchor has no positive")
    if not bool(neg.any(dim=1).all()):
        raise BatchError("unmineable batch: some anchor has no negative")
    hardest_pos = dist.masked_fill(~pos, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(~neg, float("inf")).min(dim=1).values
    return F.relu(hardest_pos - hardest_neg + margin).mean()


def dense_part_contrastive(cell_embeds: torch.Tensor, cell_texts: torch.Tensor,
                           cell_keys: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Symmetric pixel-level InfoNCE over gathered cells.

    The positive for a cell anchor is its own (visual, text) pairing; the
    negatives are all sampled cells carrying a different (identity, part) key.
    Same-key cells other than the anchor's own pair stay out of the pool —
    they are positive pairs, not negatives.
    """
    if torch.unique(cell_keys).numel() < 2:
        raise BatchError("dense loss needs >= 2 distinct (identity, part) keys")
    v = _normalize(cell_embeds)
    t = _normalize(cell_texts)
    diff_key = cell_keys.unsqueeze(0) != cell_keys.unsqueeze(1)
    pool = diff_key | torch.eye(len(cell_keys), dtype=torch.bool, device=v.device)

    def direction(anchors, candidates):
        sims = anchors @ candidates.T / temperature
        own = sims.diagonal()
        denom = torch.logsumexp(sims.masked_fill(~pool, float("-inf")), dim=1)
        return (denom - own).mean()

    return direction(v, t) + direction(t, v)


def stratified_cell_sample(parsing_ds: np.ndarray, cap: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Flat cell indices for one image: at most `cap`, spread across parts.

    Allocation round-robins over present part ids in ascending order;
    selection within a part is an rng permutation. IGNORE cells never sample.
    When cap >= #valid cells every cell is returned (no-op sampling).
    """
    flat = parsing_ds.ravel()
    present = sorted(int(p) for p in np.unique(flat) if p != IGNORE_ID)
    cells = {p: np.flatnonzero(flat == p) for p in present}
    total = sum(len(c) for c in cells.values())
    if total <= cap:
        return np.flatnonzero(flat != IGNORE_ID)
    alloc = {p: 0 for p in present}
    remaining = cap
    while remaining > 0:
        progressed = False
        for p in present:
            if remaining > 0 and alloc[p] < len(cells[p]):
                alloc[p] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    chosen = [rng.permutation(cells[p])[: alloc[p]] for p in present]
    return np.sort(np.concatenate(chosen))


def mse_align(cells: torch.Tensor, target_cells: torch.Tensor,
              ignore: torch.Tensor | None = None,
              cell_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between per-cell L2-normalized embedding maps.

    Mean runs over non-ignored cells and channels; an all-ignored target is
    defined as zero loss. Optional per-cell weights rescale the cell mean.
    """
    if cells.shape != target_cells.shape:
        raise ValueError(f"grid mismatch: {tuple(cells.shape)} vs {tuple(target_cells.shape)}")
    per_cell = (_normalize(cells) - _normalize(target_cells)).pow(2).mean(dim=-1)
    if ignore is not None:
        valid = ~ignore
        if not bool(valid.any()):
            return cells.sum() * 0.0
        per_cell = per_cell[valid]
        if cell_weights is not None:
            cell_weights = cell_weights[valid]
    if cell_weights is not None:
        return (per_cell * cell_weights).sum() / cell_weights.sum()
    return per_cell.mean()


def prompt_objective(pair_term: torch.Tensor, part_term: torch.Tensor | None,
                     cfg: LossConfig) -> torch.Tensor:
    """Stage-1 objective: pair loss plus the dense part term."""
    if part_term is None or cfg.weight_part == 0.0:
        return pair_term
    return pair_term + cfg.weight_part * part_term


def overall_objective(id_term: torch.Tensor, triplet_term: torch.Tensor,
                      i2tce_term: torch.Tensor | None, align_term: torch.Tensor | None,
                      cfg: LossConfig) -> torch.Tensor:
    """Stage-2 objective: weighted sum of the ReID terms and the alignment MSE.

    The text terms are optional so the student-baseline arm can train on
    identity + triplet supervision alone.
    """
    total = cfg.weight_id * id_term + cfg.weight_triplet * triplet_term
    if i2tce_term is not None:
        total = total + cfg.weight_i2tce * i2tce_term
    if align_term is not None:
        total = total + cfg.weight_align * align_term
    return total
