"""Interaction/feature ingestion, k-core filtering, splits and synthetic data."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import substream

logger = logging.getLogger(__name__)

MODALITIES = ("v", "t")
_MODALITY_ALIASES = {"v": "v", "visual": "v", "image": "v", "t": "t", "textual": "t", "text": "t"}

FEAT_MAGIC = b"SIGER-FEAT"


class DataFormatError(ValueError):
    """Raised for malformed interaction or feature files."""


def modality_tag(name: str) -> str:
    try:
        return _MODALITY_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown modality {name!r}; expected one of visual/textual (v/t)") from None


@dataclass(frozen=True)
class InteractionTable:
    """Observed user-item pairs over dense index spaces.

    ``pairs`` is an ``(n, 2)`` int64 array sorted by (user, item) with no
    duplicates. Token tuples map index -> original token when known.
    """

    n_users: int
    n_items: int
    pairs: np.ndarray
    timestamps: np.ndarray | None = None
    user_tokens: tuple[str, ...] | None = None
    item_tokens: tuple[str, ...] | None = None

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs) == 0:
            raise ValueError("interaction table must hold at least one pair")
        if pairs.min() < 0 or pairs[:, 0].max() >= self.n_users or pairs[:, 1].max() >= self.n_items:
            raise ValueError("pair index out of range")
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs = pairs[order]
        keep = np.ones(len(pairs), dtype=bool)
        keep[1:] = np.any(pairs[1:] != pairs[:-1], axis=1)
        if not keep.all():
            raise ValueError("duplicate (user, item) pair")
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype=np.int64)[order]
            ts.setflags(write=False)
            object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return len(self.pairs)

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.pairs[:, 0], minlength=self.n_users)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.pairs[:, 1], minlength=self.n_items)

    def with_pairs(self, pairs: np.ndarray) -> "InteractionTable":
        """Same index spaces and tokens, different pair subset (timestamps dropped)."""
        return InteractionTable(self.n_users, self.n_items, pairs,
                                user_tokens=self.user_tokens, item_tokens=self.item_tokens)


@dataclass(frozen=True)
class ModalityFeatureMatrix:
    modality: str
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "modality", modality_tag(self.modality))
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] < 1:
            raise ValueError("feature matrix must be 2-D with a positive feature dimension")
        bad = ~np.isfinite(data).all(axis=1)
        if bad.any():
            raise DataFormatError(f"non-finite feature entry at row {int(np.flatnonzero(bad)[0])}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def select_rows(self, rows) -> "ModalityFeatureMatrix":
        return ModalityFeatureMatrix(self.modality, self.data[np.asarray(rows, dtype=np.int64)])


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    mode: str
    seed: int
    n_users: int
    n_items: int
    cold_items: np.ndarray | None = None
    dropped_users: int = 0

    def part(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split part {name!r}")
        return getattr(self, name)

    def train_table(self) -> InteractionTable:
        return InteractionTable(self.n_users, self.n_items, self.train)


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 200
    n_items: int = 100
    latent_dim: int = 16
    interactions_per_user: int = 15
    noise_std: float = 0.3
    n_clusters: int = 5
    seed: int = 7
    feature_dims: tuple[int, int] = (32, 24)
    # sharpness of the softmax over user-item latent affinities
    affinity_scale: float = 5.0

    def __post_init__(self):
        counts = (self.n_users, self.n_items, self.latent_dim, self.interactions_per_user, self.n_clusters)
        if min(counts) < 1 or min(self.feature_dims) < 1:
            raise ValueError("synthetic spec counts must be positive")
        if self.noise_std < 0:
            raise ValueError("noise level must be >= 0")
        if self.interactions_per_user > self.n_items:
            raise ValueError("interactions per user exceeds item count")


# --------------------------------------------------------------------------
# Interaction files


def _map_paths(path: Path) -> tuple[Path, Path]:
    return path.with_name(path.stem + ".users.tsv"), path.with_name(path.stem + ".items.tsv")


def read_index_map(path) -> dict[str, int]:
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'token<TAB>index'")
            mapping[parts[0]] = int(parts[1])
    if sorted(mapping.values()) != list(range(len(mapping))):
        raise DataFormatError(f"{path}: indices are not contiguous from 0")
    return mapping


def write_index_map(path, tokens) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for idx, tok in enumerate(tokens):
            fh.write(f"{tok}\t{idx}\n")


def _tokens_from_map(mapping: dict[str, int]) -> tuple[str, ...]:
    out = [""] * len(mapping)
    for tok, idx in mapping.items():
        out[idx] = tok
    return tuple(out)


def load_interactions(path, persist_maps: bool = True) -> InteractionTable:
    """Read ``user<TAB>item[<TAB>timestamp]`` lines.

    Index maps are taken from the ``<stem>.users.tsv`` / ``<stem>.items.tsv``
    sidecars when present; otherwise indices follow first appearance and the
    sidecars are written (unless ``persist_maps`` is false).
    """
    path = Path(path)
    umap_path, imap_path = _map_paths(path)
    have_maps = umap_path.exists() and imap_path.exists()
    umap = read_index_map(umap_path) if have_maps else {}
    imap = read_index_map(imap_path) if have_maps else {}

    rows, stamps = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
                raise DataFormatError(f"{path}:{lineno}: expected 'user<TAB>item[<TAB>timestamp]'")
            u, i = parts[0], parts[1]
            if have_maps:
                if u not in umap or i not in imap:
                    raise DataFormatError(f"{path}:{lineno}: token missing from index map")
            else:
                umap.setdefault(u, len(umap))
                imap.setdefault(i, len(imap))
            if len(parts) == 3:
                try:
                    stamps.append(int(float(parts[2])))
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: bad timestamp {parts[2]!r}") from None
            rows.append((umap[u], imap[i]))
    if not rows:
        raise DataFormatError(f"{path}: no interactions")
    if stamps and len(stamps) != len(rows):
        raise DataFormatError(f"{path}: timestamps present on some lines only")

    pairs = np.asarray(rows, dtype=np.int64)
    ts = np.asarray(stamps, dtype=np.int64) if stamps else None
    # collapse duplicates, keeping the first occurrence
    _, first = np.unique(pairs[:, 0] * len(imap) + pairs[:, 1], return_index=True)
    first.sort()
    if len(first) < len(pairs):
        logger.info("collapsed %d duplicate interactions", len(pairs) - len(first))
    pairs = pairs[first]
    ts = ts[first] if ts is not None else None

    users, items = _tokens_from_map(umap), _tokens_from_map(imap)
    if persist_maps and not have_maps:
        write_index_map(umap_path, users)
        write_index_map(imap_path, items)
    return InteractionTable(len(users), len(items), pairs, ts, users, items)


def save_interactions(table: InteractionTable, path) -> None:
    """Write the table plus its index-map sidecars."""
    path = Path(path)
    users = table.user_tokens or tuple(f"u{k}" for k in range(table.n_users))
    items = table.item_tokens or tuple(f"i{k}" for k in range(table.n_items))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for n, (u, i) in enumerate(table.pairs):
            if table.timestamps is not None:
                fh.write(f"{users[u]}\t{items[i]}\t{table.timestamps[n]}\n")
            else:
                fh.write(f"{users[u]}\t{items[i]}\n")
    umap_path, imap_path = _map_paths(path)
    write_index_map(umap_path, users)
    write_index_map(imap_path, items)


def save_pairs(pairs: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i in pairs:
            fh.write(f"{u}\t{i}\n")


def load_pairs(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").split()
    return np.asarray(text, dtype=np.int64).reshape(-1, 2)


# --------------------------------------------------------------------------
# Feature files


def load_modality_features(path, modality: str) -> ModalityFeatureMatrix:
    """Load a SIGER-FEAT v1 binary matrix or a plain-text ``rows cols`` matrix."""
    raw = Path(path).read_bytes()
    if raw.startswith(FEAT_MAGIC):
        nl = raw.find(b"\n")
        header = raw[:nl].decode("ascii").split() if nl >= 0 else []
        if len(header) != 4 or header[1] != "1":
            raise DataFormatError(f"{path}: bad SIGER-FEAT header")
        rows, cols = int(header[2]), int(header[3])
        body = raw[nl + 1:]
        if len(body) != rows * cols * 4:
            raise DataFormatError(f"{path}: expected {rows * cols} float32 values, "
                                  f"found {len(body) / 4:g}")
        data = np.frombuffer(body, dtype="<f4").reshape(rows, cols)
    else:
        tokens = raw.decode("utf-8").split()
        if len(tokens) < 2:
            raise DataFormatError(f"{path}: missing 'rows cols' header")
        rows, cols = int(tokens[0]), int(tokens[1])
        values = tokens[2:]
        if len(values) != rows * cols:
            raise DataFormatError(f"{path}: header declares {rows}x{cols} but found "
                                  f"{len(values)} values (truncated or overlong)")
        data = np.asarray([float(v) for v in values], dtype=np.float64).reshape(rows, cols)
    if rows < 1 or cols < 1:
        raise DataFormatError(f"{path}: empty feature matrix")
    return ModalityFeatureMatrix(modality, data)


def save_modality_features(features: ModalityFeatureMatrix, path, binary: bool = True) -> None:
    rows, cols = features.data.shape
    if binary:
        with open(path, "wb") as fh:
            fh.write(f"SIGER-FEAT 1 {rows} {cols}\n".encode("ascii"))
            fh.write(features.data.astype("<f4").tobytes())
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{rows} {cols}\n")
            for row in features.data:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")


# --------------------------------------------------------------------------
# Filtering and splits


def kcore_keep(table: InteractionTable, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Original user and item indices surviving iterative degree-``k`` peeling."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pairs = table.pairs
    alive = np.ones(len(pairs), dtype=bool)
    while True:
        p = pairs[alive]
        udeg = np.bincount(p[:, 0], minlength=table.n_users)
        ideg = np.bincount(p[:, 1], minlength=table.n_items)
        ok = (udeg[pairs[:, 0]] >= k) & (ideg[pairs[:, 1]] >= k) & alive
        if np.array_equal(ok, alive):
            break
        alive = ok
    p = pairs[alive]
    return np.unique(p[:, 0]), np.unique(p[:, 1])


def kcore_filter(table: InteractionTable, k: int) -> InteractionTable:
    """k-core of the bipartite graph with re-densified indices."""
    users, items = kcore_keep(table, k)
    if len(users) == 0:
        raise ValueError("k-core empty")
    umap = np.full(table.n_users, -1, dtype=np.int64)
    imap = np.full(table.n_items, -1, dtype=np.int64)
    umap[users] = np.arange(len(users))
    imap[items] = np.arange(len(items))
    mask = (umap[table.pairs[:, 0]] >= 0) & (imap[table.pairs[:, 1]] >= 0)
    pairs = np.stack([umap[table.pairs[mask, 0]], imap[table.pairs[mask, 1]]], axis=1)
    ts = table.timestamps[mask] if table.timestamps is not None else None
    utok = tuple(table.user_tokens[u] for u in users) if table.user_tokens else None
    itok = tuple(table.item_tokens[i] for i in items) if table.item_tokens else None
    return InteractionTable(len(users), len(items), pairs, ts, utok, itok)


def _check_ratios(ratios):
    if len(ratios) != 3 or min(ratios) <= 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError("ratios must be three positive numbers summing to 1")


def _floor(x: float) -> int:
    # 0.7 * 10 == 6.999..., so allow a hair of slack
    return int(math.floor(x + 1e-9))


def _split_users(pairs: np.ndarray, n_users: int, fractions: tuple[float, ...], rng) -> list[np.ndarray]:
    """Per-user shuffled split; element 0 of the result takes the remainder."""
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    bounds = np.searchsorted(pairs[:, 0], np.arange(n_users + 1))
    parts: list[list[np.ndarray]] = [[] for _ in range(len(fractions) + 1)]
    for u in range(n_users):
        rows = pairs[bounds[u]:bounds[u + 1]]
        n = len(rows)
        if n == 0:
            continue
        if n < 3:
            parts[0].append(rows)
            continue
        rows = rows[rng.permutation(n)]
        counts = [_floor(n * f) for f in fractions]
        start = n - sum(counts)
        parts[0].append(rows[:start])
        for j, c in enumerate(counts, 1):
            parts[j].append(rows[start:start + c])
            start += c
    out = []
    for chunks in parts:
        arr = np.concatenate(chunks) if chunks else np.empty((0, 2), dtype=np.int64)
        out.append(arr[np.lexsort((arr[:, 1], arr[:, 0]))])
    return out


def split_general(table: InteractionTable, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Per-user random train/valid/test split with floor-proportional counts."""
    _check_ratios(ratios)
    rng = substream(seed, "split")
    train, valid, test = _split_users(table.pairs, table.n_users, (ratios[1], ratios[2]), rng)
    return DatasetSplit(train, valid, test, "general", seed, table.n_users, table.n_items)


def split_cold_start(table: InteractionTable, item_fraction: float = 0.2, seed: int = 0,
                     ratios=(0.8, 0.1, 0.1)) -> DatasetSplit:
    """Hold out every interaction of a random item subset as the test split.

    Remaining pairs are split per user into train/valid with the train:valid
    proportion of ``ratios``.
    """
    _check_ratios(ratios)
    if not 0 < item_fraction < 1:
        raise ValueError("item_fraction must lie in (0, 1)")
    n_cold = math.ceil(item_fraction * table.n_items - 1e-9)
    if n_cold < 1:
        raise ValueError("item_fraction selects no items")
    candidates = np.flatnonzero(table.item_degrees() > 0)
    if n_cold > len(candidates):
        raise ValueError("not enough interacted items to sample as cold")
    rng = substream(seed, "split")
    cold = np.sort(rng.choice(candidates, size=n_cold, replace=False))
    is_cold = np.zeros(table.n_items, dtype=bool)
    is_cold[cold] = True
    mask = is_cold[table.pairs[:, 1]]
    test, warm = table.pairs[mask], table.pairs[~mask]
    train, valid = _split_users(warm, table.n_users, (ratios[1] / (ratios[0] + ratios[1]),), rng)
    dropped = int(np.count_nonzero((table.user_degrees() > 0)
                                   & (np.bincount(train[:, 0], minlength=table.n_users) == 0)))
    if dropped:
        logger.warning("cold-start split: %d users have no training interactions", dropped)
    return DatasetSplit(train, valid, test, "cold-start", seed, table.n_users, table.n_items,
                        cold_items=cold, dropped_users=dropped)


# --------------------------------------------------------------------------
# Synthetic data


def _unit_rows(x):
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norm == 0, 1.0, norm)


def generate_synthetic(spec: SyntheticSpec, return_clusters: bool = False):
    """Clustered users/items with modality features derived from item latents.

    Returns ``(table, visual, textual)``, plus the item cluster labels when
    ``return_clusters`` is set. Each user draws
    ``interactions_per_user`` distinct items with probability proportional to
    the softmax of latent affinities (Gumbel top-k).
    """
    rng = np.random.default_rng(spec.seed)
    centers = _unit_rows(rng.standard_normal((spec.n_clusters, spec.latent_dim)))
    item_cluster = rng.permutation(np.arange(spec.n_items) % spec.n_clusters)
    user_cluster = rng.permutation(np.arange(spec.n_users) % spec.n_clusters)
    jitter = 0.3 / math.sqrt(spec.latent_dim)
    item_latent = centers[item_cluster] + jitter * rng.standard_normal((spec.n_items, spec.latent_dim))
    user_latent = centers[user_cluster] + jitter * rng.standard_normal((spec.n_users, spec.latent_dim))

    logits = spec.affinity_scale * user_latent @ item_latent.T
    gumbel = rng.gumbel(size=logits.shape)
    picks = np.argsort(-(logits + gumbel), axis=1, kind="stable")[:, :spec.interactions_per_user]
    users = np.repeat(np.arange(spec.n_users), spec.interactions_per_user)
    pairs = np.stack([users, picks.reshape(-1)], axis=1)

    feats = []
    for tag, dim in zip(MODALITIES, spec.feature_dims):
        # random orthonormal embedding when dim >= latent_dim keeps cosines intact
        q, _ = np.linalg.qr(rng.standard_normal((max(dim, spec.latent_dim), spec.latent_dim)))
        proj = q[:dim]
        data = item_latent @ proj.T + spec.noise_std * rng.standard_normal((spec.n_items, dim))
        feats.append(ModalityFeatureMatrix(tag, data.astype(np.float32).astype(np.float64)))

    table = InteractionTable(spec.n_users, spec.n_items, pairs,
                             user_tokens=tuple(f"u{k}" for k in range(spec.n_users)),
                             item_tokens=tuple(f"i{k}" for k in range(spec.n_items)))
    if return_clusters:
        return table, feats[0], feats[1], item_cluster
    return table, feats[0], feats[1]
