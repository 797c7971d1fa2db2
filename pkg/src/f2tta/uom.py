"""Uncertainty-oriented masking: MC-dropout token uncertainty, token
selection, and the masked consistency loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterError
from .prompts import PrefixPrompt, attachments_for


@dataclass
class UncertaintySelection:
    scores: np.ndarray  # length L, index j-1 holds token j
    uncertain_ids: np.ndarray  # positions in 1..L
    reliable_ids: np.ndarray
    D: int
    ratio: float


def token_uncertainty(pooled: np.ndarray) -> np.ndarray:
    """Population std over passes of per-token pooled scalars, shape (D, L) -> (L,)."""
    pooled = np.asarray(pooled, dtype=np.float64)
    mu = pooled.mean(axis=0)
    return np.sqrt(((pooled - mu) ** 2).mean(axis=0))


@torch.no_grad()
def pooled_mc_features(model, patches: torch.Tensor, D: int, seed: int, feature_layer: str = "first") -> np.ndarray:
    """Channel-mean of every image token over ``D`` MC-dropout passes, shape (D, L).

    ``feature_layer="first"`` reads the output of the first transformer layer
    (where dropout is applied); ``"final"`` reads the last layer.
    """
    if patches.dim() == 2:
        patches = patches.unsqueeze(0)
    gen = torch.Generator().manual_seed(int(seed))
    batch = patches.expand(D, -1, -1)
    upto = 1 if feature_layer == "first" else None
    if feature_layer not in ("first", "final"):
        raise ParameterError(f"feature_layer must be 'first' or 'final', got {feature_layer!r}")
    out = model(batch, mode="mc_dropout", generator=gen, upto=upto)
    feats = out.hidden[-1][:, 1:]  # drop class token
    return feats.mean(dim=-1).double().numpy()


def estimate_uncertainty(model, patches: torch.Tensor, D: int = 10, seed: int = 0, feature_layer: str = "first") -> np.ndarray:
    if D < 2:
        raise ParameterError(f"D must be >= 2 stochastic passes, got {D}")
    return token_uncertainty(pooled_mc_features(model, patches, D, seed, feature_layer))


def n_selected(L: int, ratio: float) -> int:
    # tolerance keeps e.g. 0.3 * 10 from flooring below 3
    return max(1, int(math.floor(ratio * L + 1e-9)))


def select_tokens(scores, ratio: float = 0.3) -> Tuple[np.ndarray, np.ndarray]:
    """Top-``ratio`` most uncertain and most reliable token ids (1-based).

    Ties are broken by lower token index; reliable ids are drawn from tokens
    not already marked uncertain.
    """
    scores = np.asarray(scores, dtype=np.float64)
    L = scores.shape[0]
    if not ratio > 0:
        raise ParameterError(f"ratio must be > 0, got {ratio}")
    n = n_selected(L, ratio)
    if 2 * n > L:
        raise ParameterError(f"uncertain and reliable sets of size {n} cannot be disjoint with L={L}")
    idx = np.arange(L)
    desc = np.lexsort((idx, -scores))
    uncertain = desc[:n]
    taken = np.zeros(L, dtype=bool)
    taken[uncertain] = True
    asc = np.lexsort((idx, scores))
    reliable = asc[~taken[asc]][:n]
    return uncertain + 1, reliable + 1


def select(model, patches, D: int = 10, ratio: float = 0.3, seed: int = 0, feature_layer: str = "first") -> UncertaintySelection:
    scores = estimate_uncertainty(model, patches, D, seed, feature_layer)
    u, r = select_tokens(scores, ratio)
    return UncertaintySelection(scores=scores, uncertain_ids=u, reliable_ids=r, D=D, ratio=ratio)


def kept_positions(L: int, removed) -> torch.Tensor:
    removed = set(int(i) for i in removed)
    kept = [j for j in range(1, L + 1) if j not in removed]
    if not kept:
        raise ParameterError("masking removed every image token")
    return torch.tensor(kept, dtype=torch.long)


def soft_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of ``logits`` against a target distribution (batch mean)."""
    return -(target * F.log_softmax(logits, dim=-1)).sum(-1).mean()


@dataclass
class ConsistencyOutput:
    loss: torch.Tensor
    y_u: torch.Tensor  # logits of the specific branch on tokens outside T_U
    y_r: torch.Tensor  # logits of the invariant branch on tokens outside T_R
    y_w: torch.Tensor  # source probabilities on the full image (detached)


def source_probs(model, patches: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return torch.softmax(model(patches).logits, dim=-1)


def _target(y_w: torch.Tensor, target_mode: str) -> torch.Tensor:
    if target_mode == "soft":
        return y_w
    if target_mode == "hard":
        return F.one_hot(y_w.argmax(-1), y_w.shape[-1]).to(y_w.dtype)
    raise ParameterError(f"target_mode must be 'soft' or 'hard', got {target_mode!r}")


def masked_consistency_loss(
    model,
    specific: PrefixPrompt,
    invariant: PrefixPrompt,
    patches: torch.Tensor,
    sel: UncertaintySelection,
    target_mode: str = "soft",
    y_w: Optional[torch.Tensor] = None,
) -> ConsistencyOutput:
    if patches.dim() == 2:
        patches = patches.unsqueeze(0)
    L = patches.shape[1]
    depth = model.config.depth
    if y_w is None:
        y_w = source_probs(model, patches)
    y_w = y_w.detach()
    target = _target(y_w, target_mode)
    y_u = model(patches, kept=kept_positions(L, sel.uncertain_ids), attachments=attachments_for([specific], depth)).logits
    y_r = model(patches, kept=kept_positions(L, sel.reliable_ids), attachments=attachments_for([invariant], depth)).logits
    loss = soft_cross_entropy(y_u, target) + soft_cross_entropy(y_r, target)
    return ConsistencyOutput(loss=loss, y_u=y_u, y_r=y_r, y_w=y_w)


def pseudo_label_loss(
    model,
    specific: PrefixPrompt,
    invariant: PrefixPrompt,
    patches: torch.Tensor,
    y_w: Optional[torch.Tensor] = None,
) -> ConsistencyOutput:
    """Hard pseudo-label loss on the full image for both branches (masking disabled)."""
    if patches.dim() == 2:
        patches = patches.unsqueeze(0)
    depth = model.config.depth
    if y_w is None:
        y_w = source_probs(model, patches)
    target = _target(y_w.detach(), "hard")
    y_u = model(patches, attachments=attachments_for([specific], depth)).logits
    y_r = model(patches, attachments=attachments_for([invariant], depth)).logits
    loss = soft_cross_entropy(y_u, target) + soft_cross_entropy(y_r, target)
    return ConsistencyOutput(loss=loss, y_u=y_u, y_r=y_r, y_w=y_w.detach())
