"""Full-ranking Recall@K / NDCG@K."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class MetricReport:
    ks: tuple[int, ...]
    recall: dict[int, float | None]
    ndcg: dict[int, float | None]
    n_users: int
    split: str = "test"
    variant: str = "full"

    @property
    def absent(self) -> bool:
        return self.n_users == 0

    def columns(self) -> dict[str, float | None]:
        out = {f"R@{k}": self.recall[k] for k in self.ks}
        out.update({f"N@{k}": self.ndcg[k] for k in self.ks})
        return out

    def to_csv(self) -> str:
        cols = self.columns()
        head = "split,variant,users," + ",".join(cols)
        vals = ",".join("" if v is None else repr(v) for v in cols.values())
        return f"{head}\n{self.split},{self.variant},{self.n_users},{vals}\n"

    def to_table(self) -> str:
        return format_table([self])


def format_table(reports: list[MetricReport], digits: int = 4) -> str:
    """Aligned text table, one row per report, R@K columns then N@K."""
    cols = list(reports[0].columns())
    head = ["variant", "split"] + cols
    rows = [[r.variant, r.split] + ["n/a" if v is None else f"{v:.{digits}f}" for v in r.columns().values()]
            for r in reports]
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)).rstrip() for line in [head] + rows]
    return "\n".join(lines) + "\n"


def rank_items(scores: np.ndarray, exclude=()) -> np.ndarray:
    """Non-excluded item indices by descending score, ties to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if len(exclude):
        mask = np.ones(len(scores), dtype=bool)
        mask[np.asarray(list(exclude), dtype=np.int64)] = False
        order = order[mask[order]]
    return order


def recall_at_k(ranked, relevant, k: int) -> float:
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = sum(1 for i in ranked[:k] if i in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(ranked[:k]) if i in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(len(relevant), k)))
    return dcg / idcg


def _group(pairs: np.ndarray, n_users: int) -> list[np.ndarray]:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    bounds = np.searchsorted(pairs[:, 0], np.arange(n_users + 1))
    return [pairs[bounds[u]:bounds[u + 1], 1] for u in range(n_users)]


def evaluate_scores(scores: np.ndarray, train: np.ndarray, target: np.ndarray, ks=(10, 20),
                    restrict_to=None, split: str = "test", variant: str = "full") -> MetricReport:
    """Metrics from a dense user x item score matrix.

    ``restrict_to`` (cold-start mode) limits each relevant set to those items.
    """
    ks = tuple(sorted(ks))
    n_users, n_items = scores.shape
    excluded = _group(train, n_users)
    relevant = _group(target, n_users)
    keep = None
    if restrict_to is not None:
        keep = np.zeros(n_items, dtype=bool)
        keep[np.asarray(restrict_to, dtype=np.int64)] = True
    recall = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    count = 0
    for u in range(n_users):
        rel = relevant[u]
        if keep is not None:
            rel = rel[keep[rel]]
        if len(rel) == 0:
            continue
        count += 1
        ranked = rank_items(scores[u], excluded[u])[:ks[-1]]
        rel_set = set(rel.tolist())
        for k in ks:
            recall[k] += recall_at_k(ranked, rel_set, k)
            ndcg[k] += ndcg_at_k(ranked, rel_set, k)
    if count == 0:
        return MetricReport(ks, {k: None for k in ks}, {k: None for k in ks}, 0, split, variant)
    return MetricReport(ks, {k: recall[k] / count for k in ks}, {k: ndcg[k] / count for k in ks},
                        count, split, variant)


def score_matrix(model, graphs, features) -> np.ndarray:
    with torch.no_grad():
        final = model.representations(graphs, features)
    users, items = final[:model.n_users], final[model.n_users:]
    return (users @ items.T).numpy()


def evaluate(model, graphs, features, split, part: str = "test", ks=(10, 20),
             variant: str = "full") -> MetricReport:
    """Clean-pass full ranking on ``split.<part>``, excluding each user's train items."""
    scores = score_matrix(model, graphs, features)
    restrict, tag = None, part
    if split.mode == "cold-start" and part == "test":
        restrict, tag = split.cold_items, "test-cold"
    return evaluate_scores(scores, split.train, split.part(part), ks, restrict, tag, variant)
