"""Training objectives: BPR, perturbation contrast, dual alignment, L2."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from .model import ForwardOutputs, l2_rows
from .rng import torch_substream

COMPONENTS = ("bpr", "l_p", "l_mm_user", "l_mm_item", "l_bm", "l2")


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 0.01
    lambda_a: float = 0.01
    lambda_r: float = 1e-5
    tau0: float = 0.2
    tau1: float = 0.2
    tau2: float = 0.2
    # "anchor" (anchor-based InfoNCE), "standard" (no anchors) or "none"
    alignment: str = "anchor"
    symmetric_anchor: bool = False
    # contrastive denominators over in-batch ids ("batch") or everything ("full")
    universe: str = "batch"

    def __post_init__(self):
        if min(self.tau0, self.tau1, self.tau2) <= 0:
            raise ValueError("temperatures must be > 0")
        vals = (self.lambda_p, self.lambda_a, self.lambda_r)
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("loss weights must be finite and non-negative")
        if self.alignment not in ("anchor", "standard", "none"):
            raise ValueError(f"unknown alignment form {self.alignment!r}")
        if self.universe not in ("batch", "full"):
            raise ValueError(f"unknown universe {self.universe!r}")


@dataclass(frozen=True)
class BatchTriples:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return len(self.users)

    @property
    def unique_users(self) -> np.ndarray:
        return np.unique(self.users)

    @property
    def unique_items(self) -> np.ndarray:
        return np.unique(np.concatenate([self.pos, self.neg]))


@dataclass
class LossBreakdown:
    bpr: float = 0.0
    l_p: float = 0.0
    l_mm_user: float = 0.0
    l_mm_item: float = 0.0
    l_bm: float = 0.0
    l2: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class NonFiniteLossError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Individual terms


def cosine_matrix(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities; any pair with a zero vector scores 0."""
    return l2_rows(x) @ l2_rows(y).T


def cosine_pairs(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return (l2_rows(x) * l2_rows(y)).sum(dim=1)


def bpr_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """mean(-log sigmoid(pos - neg)) computed as softplus(neg - pos)."""
    if pos_scores.shape != neg_scores.shape or pos_scores.numel() == 0:
        raise ValueError("positive and negative scores must be equal-length and non-empty")
    return F.softplus(neg_scores - pos_scores).mean()


def info_nce(anchor: torch.Tensor, other: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean of -log softmax over ``other`` with the matching row as positive."""
    if anchor.shape[0] == 0:
        raise ValueError("InfoNCE needs a non-empty universe")
    logits = cosine_matrix(anchor, other) / tau
    return (torch.logsumexp(logits, dim=1) - logits.diagonal()).mean()


def perturbation_loss(views: dict[str, tuple[torch.Tensor, torch.Tensor]], tau0: float,
                      items=None) -> torch.Tensor:
    """Sum over modalities of view-vs-view InfoNCE across ``items`` (all if None)."""
    total = None
    for first, second in views.values():
        if items is not None:
            if len(items) == 0:
                raise ValueError("empty negative set")
            first, second = first[items], second[items]
        term = info_nce(first, second, tau0)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no views supplied")
    return total


def anchor_infonce(sem_v: torch.Tensor, sem_t: torch.Tensor, anchors: torch.Tensor, tau1: float,
                   symmetric: bool = False) -> torch.Tensor:
    """Visual/textual alignment whose positive affinity is their mean similarity to the anchor.

    Negatives pair each visual row with every other textual row. ``symmetric``
    averages in the mirrored (textual anchor, visual negatives) direction.
    """
    n = sem_v.shape[0]
    if n == 0:
        raise ValueError("anchor InfoNCE needs a non-empty universe")
    pos = (cosine_pairs(sem_v, anchors) + cosine_pairs(sem_t, anchors)) / (2 * tau1)
    eye = torch.eye(n, dtype=torch.bool)

    def direction(a, b):
        logits = torch.where(eye, pos[:, None], cosine_matrix(a, b) / tau1)
        return (torch.logsumexp(logits, dim=1) - pos).mean()

    loss = direction(sem_v, sem_t)
    if symmetric:
        loss = 0.5 * (loss + direction(sem_t, sem_v))
    return loss


def behavior_semantic_loss(fused: torch.Tensor, behavior: torch.Tensor, tau2: float,
                           users, items, n_users: int) -> torch.Tensor:
    """User-side plus item-side InfoNCE of fused semantics against behaviour embeddings."""
    u = torch.as_tensor(users, dtype=torch.long)
    i = torch.as_tensor(items, dtype=torch.long) + n_users
    return info_nce(fused[u], behavior[u], tau2) + info_nce(fused[i], behavior[i], tau2)


def l2_term(final: torch.Tensor, users, items, n_users: int) -> torch.Tensor:
    """Squared Frobenius norm of the touched user and item rows of E."""
    rows = np.unique(np.concatenate([np.asarray(users, dtype=np.int64),
                                     np.asarray(items, dtype=np.int64) + n_users]))
    return final[torch.from_numpy(rows)].pow(2).sum()


# --------------------------------------------------------------------------
# Combination


def combine(components: dict[str, torch.Tensor], weights: LossWeights):
    return (components["bpr"] + weights.lambda_p * components["l_p"]
            + weights.lambda_a * (components["l_mm_user"] + components["l_mm_item"] + components["l_bm"])
            + weights.lambda_r * components["l2"])


def total_loss(components: dict, weights: LossWeights) -> LossBreakdown:
    values = {}
    for name in COMPONENTS:
        v = float(components.get(name, 0.0))
        if not math.isfinite(v):
            raise NonFiniteLossError(f"loss component {name} is not finite ({v})")
        values[name] = v
    total = combine(values, weights)
    return LossBreakdown(total=total, **values)


def compute_components(out: ForwardOutputs, batch: BatchTriples, weights: LossWeights,
                       n_users: int, n_items: int, alignment: bool | None = None) -> dict[str, torch.Tensor]:
    """All loss components for one forward pass (views present iff perturbation ran).

    Alignment terms are skipped (left at 0) when ``alignment`` is false; by
    default they are computed only if ``lambda_a > 0``.
    """
    if weights.universe == "full":
        users, items = np.arange(n_users), np.arange(n_items)
    else:
        users, items = batch.unique_users, batch.unique_items
    u_idx = torch.from_numpy(users)
    i_idx = torch.from_numpy(items) + n_users
    final = out.final
    u = torch.from_numpy(batch.users)
    pos = (final[u] * final[torch.from_numpy(batch.pos) + n_users]).sum(dim=1)
    neg = (final[u] * final[torch.from_numpy(batch.neg) + n_users]).sum(dim=1)
    zero = final.new_zeros(())
    comps = {"bpr": bpr_loss(pos, neg), "l_p": zero, "l_mm_user": zero, "l_mm_item": zero,
             "l_bm": zero, "l2": l2_term(final, batch.unique_users, batch.unique_items, n_users)}
    if out.views:
        comps["l_p"] = perturbation_loss(out.views, weights.tau0, torch.from_numpy(items))
    if not (weights.lambda_a > 0 if alignment is None else alignment):
        return comps
    sem = out.semantic
    if weights.alignment != "none" and len(sem) >= 2:
        sv, st = sem["v"], sem["t"]
        for key, idx in (("l_mm_user", u_idx), ("l_mm_item", i_idx)):
            if weights.alignment == "anchor":
                comps[key] = anchor_infonce(sv[idx], st[idx], out.behavior[idx], weights.tau1,
                                            weights.symmetric_anchor)
            else:
                comps[key] = info_nce(sv[idx], st[idx], weights.tau1)
    comps["l_bm"] = behavior_semantic_loss(out.fused, out.behavior, weights.tau2, users, items, n_users)
    return comps


OBJECTIVES = ("total",) + COMPONENTS + ("l_mm",)


def batch_objective(model, graphs, features, batch: BatchTriples, weights: LossWeights,
                    generator: torch.Generator | None = None, objective: str = "total"):
    """Scalar objective tensor and its components for one batch.

    Perturbed views are drawn only when ``lambda_p > 0`` (or the objective is
    ``l_p``) and a generator is supplied.
    """
    perturb = generator is not None and (weights.lambda_p > 0 or objective == "l_p")
    out = model(graphs, features, perturb=perturb, generator=generator)
    align = weights.lambda_a > 0 or objective in ("l_mm", "l_mm_user", "l_mm_item", "l_bm")
    comps = compute_components(out, batch, weights, model.n_users, model.n_items, align)
    if objective == "total":
        value = combine(comps, weights)
    elif objective == "l_mm":
        value = comps["l_mm_user"] + comps["l_mm_item"]
    elif objective in COMPONENTS:
        value = comps[objective]
    else:
        raise ValueError(f"unknown objective {objective!r}")
    return value, comps


def gradients(model, graphs, features, batch: BatchTriples, weights: LossWeights,
              seed: int | None = None, objective: str = "total") -> dict[str, torch.Tensor]:
    """Exact parameter gradients by reverse-mode autodiff.

    ``seed`` fixes the perturbation draws, so repeated calls replay the same
    noise and shuffles.
    """
    gen = torch_substream(seed, "perturbation") if seed is not None else None
    value, _ = batch_objective(model, graphs, features, batch, weights, gen, objective)
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    return {name: torch.zeros_like(p) if g is None else g for (name, p), g in zip(params.items(), grads)}
