"""Item-item and user-item graphs, all as canonical float64 CSR matrices.

Canonical form: sorted column indices, summed duplicates, no stored zeros.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

CSR_MAGIC = b"SIGER-CSR"


@dataclass(frozen=True)
class GraphConfig:
    kc: int = 5
    km: int = 10
    beta: float = 0.3
    include_self_modality: bool = True

    def __post_init__(self):
        if self.kc < 1 or self.km < 1:
            raise ValueError("top-K values must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


@dataclass(frozen=True)
class CoverageHistogram:
    modality: str
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def to_csv(self) -> str:
        lines = ["modality,n_covered,items"]
        lines += [f"{self.modality},{n},{c}" for n, c in enumerate(self.counts)]
        return "\n".join(lines) + "\n"


def canonical(m) -> sp.csr_matrix:
    m = sp.csr_matrix(m, dtype=np.float64, copy=True)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


def interaction_matrix(pairs: np.ndarray, n_users: int, n_items: int) -> sp.csr_matrix:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    data = np.ones(len(pairs))
    return canonical(sp.coo_matrix((data, (pairs[:, 0], pairs[:, 1])), shape=(n_users, n_items)))


def cooccurrence_counts(pairs: np.ndarray, n_users: int, n_items: int) -> sp.csr_matrix:
    """C[i, j] = number of users who interacted with both i and j; zero diagonal."""
    if len(pairs) == 0:
        raise ValueError("train pairs must be non-empty")
    r = interaction_matrix(pairs, n_users, n_items)
    r.data[:] = 1.0
    c = (r.T @ r).tolil()
    c.setdiag(0)
    return canonical(c)


def collaborative_weight(counts: np.ndarray) -> np.ndarray:
    """sigmoid(log c) elementwise."""
    return 1.0 / (1.0 + np.exp(-np.log(counts)))


def topk_rows(m: sp.csr_matrix, k: int) -> sp.csr_matrix:
    """Keep the ``k`` largest stored values of every row, ties to the smaller column."""
    m = canonical(m)
    indptr, indices, data = [0], [], []
    for r in range(m.shape[0]):
        lo, hi = m.indptr[r], m.indptr[r + 1]
        cols, vals = m.indices[lo:hi], m.data[lo:hi]
        if len(cols) > k:
            keep = np.lexsort((cols, -vals))[:k]
            keep.sort()
            cols, vals = cols[keep], vals[keep]
        indices.append(cols)
        data.append(vals)
        indptr.append(indptr[-1] + len(cols))
    out = sp.csr_matrix((np.concatenate(data) if data else [], np.concatenate(indices) if indices else [],
                         indptr), shape=m.shape)
    return canonical(out)


def collaborative_graph(counts: sp.csr_matrix, kc: int) -> sp.csr_matrix:
    """Top-``kc`` collaborative neighbours per item weighted by sigmoid(log C)."""
    cr = canonical(counts).copy()
    cr.data = collaborative_weight(cr.data)
    return topk_rows(cr, kc)


def sym_normalize(m: sp.csr_matrix) -> sp.csr_matrix:
    """D^-1/2 M D^-1/2 with D the row sums; zero-degree factors are 0."""
    m = canonical(m)
    if m.nnz and m.data.min() < 0:
        raise ValueError("sym_normalize expects non-negative weights")
    if m.shape[0] != m.shape[1]:
        raise ValueError("sym_normalize expects a square matrix")
    deg = np.asarray(m.sum(axis=1)).ravel()
    out = m.copy()
    rows = np.repeat(np.arange(m.shape[0]), np.diff(m.indptr))
    denom = np.sqrt(deg[rows] * deg[m.indices])
    # a stored entry can still meet a zero-degree column in a directed graph
    out.data = np.divide(m.data, denom, out=np.zeros_like(m.data), where=denom > 0)
    return canonical(out)


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=1)
    zero = norm == 0
    return x / np.where(zero, 1.0, norm)[:, None], zero


def similarity_knn(features: np.ndarray, km: int, include_self: bool = True,
                   block: int = 1024) -> sp.csr_matrix:
    """Top-``km`` rows of H = (1 + cos) / 2, before normalisation.

    With ``include_self`` the item itself takes one of the ``km`` slots with
    score 1.0; otherwise the diagonal is excluded. Blocked over rows.
    """
    x, zero = _unit_rows(np.asarray(features, dtype=np.float64))
    if zero.any():
        logger.warning("%d all-zero feature rows; their cosine similarities are set to 0",
                       int(zero.sum()))
    n = x.shape[0]
    indptr, indices, data = [0], [], []
    for start in range(0, n, block):
        stop = min(start + block, n)
        h = (1.0 + np.clip(x[start:stop] @ x.T, -1.0, 1.0)) / 2.0
        local = np.arange(stop - start)
        h[local, local + start] = np.inf if include_self else -np.inf
        width = min(km, n if include_self else n - 1)
        order = np.argsort(-h, axis=1, kind="stable")[:, :width]
        for r in local:
            cols = np.sort(order[r])
            vals = h[r, cols]
            vals[cols == start + r] = 1.0
            indices.append(cols)
            data.append(vals)
            indptr.append(indptr[-1] + len(cols))
    out = sp.csr_matrix((np.concatenate(data), np.concatenate(indices), indptr), shape=(n, n))
    return canonical(out)


def modality_graph(features: np.ndarray, km: int, include_self: bool = True) -> sp.csr_matrix:
    return sym_normalize(similarity_knn(features, km, include_self))


def fuse_graphs(collab: sp.csr_matrix, semantic: sp.csr_matrix, beta: float) -> sp.csr_matrix:
    """beta * collab + (1 - beta) * semantic over the union of patterns."""
    if collab.shape != semantic.shape:
        raise ValueError(f"graph shapes differ: {collab.shape} vs {semantic.shape}")
    return canonical(beta * canonical(collab) + (1.0 - beta) * canonical(semantic))


def bipartite_adjacency(pairs: np.ndarray, n_users: int, n_items: int) -> sp.csr_matrix:
    """Normalised [[0, R], [R^T, 0]] with users first."""
    if len(pairs) == 0:
        raise ValueError("train pairs must be non-empty")
    r = interaction_matrix(pairs, n_users, n_items)
    g = sp.bmat([[None, r], [r.T, None]], format="csr")
    g.resize((n_users + n_items, n_users + n_items))
    return sym_normalize(g)


def user_item_norm(pairs: np.ndarray, n_users: int, n_items: int) -> sp.csr_matrix:
    """R scaled by 1/sqrt(user degree * item degree)."""
    if len(pairs) == 0:
        raise ValueError("train pairs must be non-empty")
    r = interaction_matrix(pairs, n_users, n_items)
    udeg = np.asarray(r.sum(axis=1)).ravel()
    ideg = np.asarray(r.sum(axis=0)).ravel()
    rows = np.repeat(np.arange(n_users), np.diff(r.indptr))
    r.data = r.data / np.sqrt(udeg[rows] * ideg[r.indices])
    return canonical(r)


def collaborative_coverage(semantic: sp.csr_matrix, counts: sp.csr_matrix, top_n: int = 5,
                           modality: str = "") -> CoverageHistogram:
    """How many of each item's ``top_n`` co-occurring items are semantic neighbours."""
    if semantic.shape != counts.shape:
        raise ValueError("semantic and count matrices must share a shape")
    semantic, counts = canonical(semantic), canonical(counts)
    hist = np.zeros(top_n + 1, dtype=np.int64)
    for i in range(counts.shape[0]):
        lo, hi = counts.indptr[i], counts.indptr[i + 1]
        if hi == lo:
            continue
        cols, vals = counts.indices[lo:hi], counts.data[lo:hi]
        top = cols[np.lexsort((cols, -vals))[:top_n]]
        neigh = semantic.indices[semantic.indptr[i]:semantic.indptr[i + 1]]
        hist[np.isin(top, neigh).sum()] += 1
    return CoverageHistogram(modality, tuple(int(c) for c in hist))


# --------------------------------------------------------------------------
# Serialisation


def csr_bytes(m: sp.csr_matrix) -> bytes:
    m = canonical(m)
    rows, cols = m.shape
    head = f"SIGER-CSR 1 {rows} {cols} {m.nnz}\n".encode("ascii")
    return (head + m.indptr.astype("<i8").tobytes() + m.indices.astype("<i4").tobytes()
            + m.data.astype("<f8").tobytes())


def save_csr(m: sp.csr_matrix, path) -> None:
    Path(path).write_bytes(csr_bytes(m))


def load_csr(path) -> sp.csr_matrix:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    head = raw[:nl].decode("ascii").split() if raw.startswith(CSR_MAGIC) and nl > 0 else []
    if len(head) != 5 or head[1] != "1":
        raise ValueError(f"{path}: not a SIGER-CSR v1 file")
    rows, cols, nnz = (int(v) for v in head[2:])
    body = memoryview(raw)[nl + 1:]
    expected = 8 * (rows + 1) + 4 * nnz + 8 * nnz
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    indptr = np.frombuffer(body[:8 * (rows + 1)], dtype="<i8")
    indices = np.frombuffer(body[8 * (rows + 1):8 * (rows + 1) + 4 * nnz], dtype="<i4")
    data = np.frombuffer(body[8 * (rows + 1) + 4 * nnz:], dtype="<f8")
    return canonical(sp.csr_matrix((data.copy(), indices.copy(), indptr.copy()), shape=(rows, cols)))


# --------------------------------------------------------------------------
# Full graph bundle


@dataclass
class GraphSet:
    """Every frozen graph one model run propagates on."""

    counts: sp.csr_matrix
    collab: sp.csr_matrix
    knn: dict[str, sp.csr_matrix]
    semantic: dict[str, sp.csr_matrix]
    eisg: dict[str, sp.csr_matrix]
    adjacency: sp.csr_matrix
    user_item: sp.csr_matrix
    key: str = ""
    coverage: dict[str, CoverageHistogram] = field(default_factory=dict)

    def files(self) -> dict[str, sp.csr_matrix]:
        out = {"counts": self.counts, "collab": self.collab, "adjacency": self.adjacency,
               "user_item": self.user_item}
        for m in self.semantic:
            out[f"knn_{m}"] = self.knn[m]
            out[f"semantic_{m}"] = self.semantic[m]
            out[f"eisg_{m}"] = self.eisg[m]
        return out


def graph_key(train: np.ndarray, n_users: int, n_items: int, features: dict[str, np.ndarray],
              config: GraphConfig) -> str:
    h = hashlib.sha256()
    h.update(f"{n_users} {n_items} {config.kc} {config.km} {config.beta!r} "
             f"{int(config.include_self_modality)}".encode())
    h.update(np.ascontiguousarray(train, dtype="<i8").tobytes())
    for m in sorted(features):
        h.update(m.encode())
        h.update(np.ascontiguousarray(features[m], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def build_graphs(train: np.ndarray, n_users: int, n_items: int, features: dict[str, np.ndarray],
                 config: GraphConfig, cache_dir=None) -> GraphSet:
    """Build (or load from ``cache_dir``) the graphs for one training set."""
    key = graph_key(train, n_users, n_items, features, config)
    modalities = sorted(features)
    target = Path(cache_dir) / key if cache_dir is not None else None
    names = ["counts", "collab", "adjacency", "user_item"]
    names += [f"{p}_{m}" for m in modalities for p in ("knn", "semantic", "eisg")]
    if target is not None and all((target / f"{n}.csr").exists() for n in names):
        logger.info("graph cache hit: %s", target)
        mats = {n: load_csr(target / f"{n}.csr") for n in names}
        graphs = GraphSet(mats["counts"], mats["collab"],
                          {m: mats[f"knn_{m}"] for m in modalities},
                          {m: mats[f"semantic_{m}"] for m in modalities},
                          {m: mats[f"eisg_{m}"] for m in modalities},
                          mats["adjacency"], mats["user_item"], key)
    else:
        counts = cooccurrence_counts(train, n_users, n_items)
        collab = sym_normalize(collaborative_graph(counts, config.kc))
        knn, semantic, eisg = {}, {}, {}
        for m in modalities:
            knn[m] = similarity_knn(features[m], config.km, config.include_self_modality)
            semantic[m] = sym_normalize(knn[m])
            eisg[m] = fuse_graphs(collab, semantic[m], config.beta)
        graphs = GraphSet(counts, collab, knn, semantic, eisg,
                          bipartite_adjacency(train, n_users, n_items),
                          user_item_norm(train, n_users, n_items), key)
        if target is not None:
            logger.info("graph cache miss, building: %s", target)
            target.mkdir(parents=True, exist_ok=True)
            for name, mat in graphs.files().items():
                save_csr(mat, target / f"{name}.csr")
    graphs.coverage = {m: collaborative_coverage(graphs.knn[m], graphs.counts, 5, m) for m in modalities}
    return graphs
