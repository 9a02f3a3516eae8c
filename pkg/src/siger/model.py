"""Behaviour/semantic encoders, modulus-weighted perturbation and scoring."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn
import torch.nn.functional as F

from .rng import torch_substream

DTYPE = torch.float64
CKPT_MAGIC = b"SIGER-CKPT"


@dataclass(frozen=True)
class ModelHyper:
    dim: int = 64
    layers_ui: int = 3
    layers_ii: int = 2
    epsilon: float = 0.05
    activation: str = "sigmoid"
    # replace modulus weights by ones (MP* ablation)
    uniform_perturbation: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.layers_ui < 0 or self.layers_ii < 1 or self.epsilon < 0:
            raise ValueError("invalid model hyperparameters")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")


ACTIVATIONS = {
    "sigmoid": torch.sigmoid,
    "leaky_relu": F.leaky_relu,
}


@dataclass
class ForwardOutputs:
    behavior: torch.Tensor                      # Ê_id, users first
    semantic: dict[str, torch.Tensor]           # Ẽ_m, users first
    fused: torch.Tensor                         # E_mf
    final: torch.Tensor                         # E
    views: dict[str, tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)
    perturb_weights: list[torch.Tensor] = field(default_factory=list)

    def split(self, n_users: int, x: torch.Tensor):
        return x[:n_users], x[n_users:]


def to_torch_sparse(m: sp.spmatrix) -> torch.Tensor:
    coo = sp.coo_matrix(m)
    idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
    val = torch.from_numpy(coo.data.astype(np.float64))
    return torch.sparse_coo_tensor(idx, val, coo.shape, dtype=DTYPE, check_invariants=False).coalesce()


def spmm(a: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return torch.sparse.mm(a, x) if a.is_sparse else a @ x


# --------------------------------------------------------------------------
# Building blocks


def behavior_propagate(adj: torch.Tensor, emb: torch.Tensor, layers: int) -> torch.Tensor:
    """LightGCN: mean of E^0..E^L with E^l = adj @ E^{l-1}."""
    out, h = emb, emb
    for _ in range(layers):
        h = spmm(adj, h)
        out = out + h
    return out / (layers + 1)


def purify(item_emb: torch.Tensor, transformed: torch.Tensor) -> torch.Tensor:
    return item_emb * transformed


def semantic_propagate(graph: torch.Tensor, emb: torch.Tensor, layers: int) -> torch.Tensor:
    """Final layer of ``layers`` propagation steps (no layer averaging)."""
    for _ in range(layers):
        emb = spmm(graph, emb)
    return emb


def user_semantics(user_item: torch.Tensor, item_sem: torch.Tensor) -> torch.Tensor:
    return spmm(user_item, item_sem)


def l2_rows(x: torch.Tensor) -> torch.Tensor:
    """Row-wise L2 normalisation; zero rows stay zero."""
    norm = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    return x / torch.where(norm > 0, norm, torch.ones_like(norm))


def modulus_weights(emb: torch.Tensor) -> torch.Tensor:
    """Row norms divided by the largest row norm (all zeros if that is 0)."""
    norms = torch.linalg.vector_norm(emb, dim=1)
    top = norms.max()
    if top <= 0:
        return torch.zeros_like(norms)
    return norms / top


def perturb_layer(emb: torch.Tensor, epsilon: float, generator: torch.Generator,
                  uniform: bool = False, record: list | None = None) -> torch.Tensor:
    """Sign-aligned uniform noise, then a shuffled re-normalised copy added to ``emb``."""
    n, d = emb.shape
    w = torch.ones(n, dtype=emb.dtype) if uniform else modulus_weights(emb)
    if record is not None:
        record.append(w.detach().clone())
    w = w[:, None]
    noise = torch.rand(n, d, generator=generator, dtype=emb.dtype)
    dotted = emb + epsilon * w * torch.sign(emb) * l2_rows(noise)
    perm = torch.randperm(n, generator=generator)
    return emb + epsilon * w * l2_rows(dotted)[perm]


def perturb_propagate(graph: torch.Tensor, emb: torch.Tensor, layers: int, epsilon: float,
                      generator: torch.Generator, uniform: bool = False,
                      record: list | None = None) -> torch.Tensor:
    """Semantic propagation with a perturbation injected after every layer."""
    for _ in range(layers):
        emb = perturb_layer(spmm(graph, emb), epsilon, generator, uniform, record)
    return emb


def fuse_semantics(*views: torch.Tensor) -> torch.Tensor:
    return torch.stack(views).mean(dim=0)


def final_representations(behavior: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
    return behavior + fused


def score(emb: torch.Tensor, u: int, i: int, n_users: int) -> float:
    return float(emb[u] @ emb[n_users + i])


# --------------------------------------------------------------------------
# Model


class ModalityTransform(nn.Module):
    """f_m(E) = act(W''(W' E^T + b') + b'') with a single activation at the end."""

    def __init__(self, in_dim: int, dim: int, activation: str = "sigmoid"):
        super().__init__()
        self.first = nn.Linear(in_dim, dim, dtype=DTYPE)
        self.second = nn.Linear(dim, dim, dtype=DTYPE)
        self.activation = activation

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return ACTIVATIONS[self.activation](self.second(self.first(feats)))


def transform_modality(transform: ModalityTransform, feats: torch.Tensor) -> torch.Tensor:
    return transform(feats)


@dataclass
class GraphTensors:
    adjacency: torch.Tensor
    user_item: torch.Tensor
    eisg: dict[str, torch.Tensor]

    @classmethod
    def from_graphs(cls, graphs) -> "GraphTensors":
        return cls(to_torch_sparse(graphs.adjacency), to_torch_sparse(graphs.user_item),
                   {m: to_torch_sparse(g) for m, g in graphs.eisg.items()})


class SIGER(nn.Module):
    def __init__(self, n_users: int, n_items: int, feature_dims: dict[str, int],
                 hyper: ModelHyper = ModelHyper(), seed: int = 0):
        super().__init__()
        self.n_users, self.n_items = n_users, n_items
        self.hyper = hyper
        self.modalities = tuple(sorted(feature_dims))
        self.feature_dims = dict(feature_dims)
        self.embedding = nn.Parameter(torch.empty(n_users + n_items, hyper.dim, dtype=DTYPE))
        self.transforms = nn.ModuleDict({
            m: ModalityTransform(feature_dims[m], hyper.dim, hyper.activation) for m in self.modalities
        })
        init_params(self, seed)

    def forward(self, graphs: GraphTensors, features: dict[str, torch.Tensor],
                perturb: bool = False, generator: torch.Generator | None = None,
                record_weights: bool = False) -> ForwardOutputs:
        h = self.hyper
        items_id = self.embedding[self.n_users:]
        behavior = behavior_propagate(graphs.adjacency, self.embedding, h.layers_ui)
        semantic, views, record = {}, {}, [] if record_weights else None
        for m in self.modalities:
            purified = purify(items_id, transform_modality(self.transforms[m], features[m]))
            item_sem = semantic_propagate(graphs.eisg[m], purified, h.layers_ii)
            semantic[m] = torch.cat([user_semantics(graphs.user_item, item_sem), item_sem])
            if perturb:
                if generator is None:
                    raise ValueError("perturbation requires a generator")
                views[m] = tuple(
                    perturb_propagate(graphs.eisg[m], purified, h.layers_ii, h.epsilon, generator,
                                      h.uniform_perturbation, record)
                    for _ in range(2))
        fused = fuse_semantics(*semantic.values())
        return ForwardOutputs(behavior, semantic, fused, final_representations(behavior, fused),
                              views, record or [])

    @torch.no_grad()
    def representations(self, graphs: GraphTensors, features: dict[str, torch.Tensor]) -> torch.Tensor:
        return self.forward(graphs, features).final


def _xavier_limit(rows: int, cols: int) -> float:
    return float(np.sqrt(6.0 / (rows + cols)))


def init_params(model: SIGER, seed: int) -> None:
    """Xavier-uniform user/item embeddings and transform weights; zero biases."""
    gen = torch_substream(seed, "init")
    with torch.no_grad():
        nn.init.xavier_uniform_(model.embedding[:model.n_users], generator=gen)
        nn.init.xavier_uniform_(model.embedding[model.n_users:], generator=gen)
        for m in model.modalities:
            t = model.transforms[m]
            for lin in (t.first, t.second):
                nn.init.xavier_uniform_(lin.weight, generator=gen)
                nn.init.zeros_(lin.bias)


def feature_tensors(features: dict) -> dict[str, torch.Tensor]:
    return {m: torch.tensor(np.asarray(getattr(f, "data", f)), dtype=DTYPE) for m, f in features.items()}


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: SIGER, path, extra: dict | None = None) -> None:
    """Shape-tagged little-endian float64 tensors plus a JSON manifest sidecar."""
    state = model.state_dict()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"SIGER-CKPT 1 {len(state)}\n".encode("ascii"))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f8")
            dims = " ".join(str(s) for s in arr.shape)
            fh.write(f"{name} {arr.ndim} {dims}\n".encode("ascii"))
            fh.write(arr.tobytes())
    manifest = {"n_users": model.n_users, "n_items": model.n_items,
                "feature_dims": model.feature_dims, "hyper": asdict(model.hyper)}
    manifest.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    pos = raw.find(b"\n")
    head = raw[:pos].decode("ascii").split()
    if not raw.startswith(CKPT_MAGIC) or len(head) != 3 or head[1] != "1":
        raise ValueError(f"{path}: not a SIGER-CKPT v1 file")
    out = {}
    for _ in range(int(head[2])):
        end = raw.find(b"\n", pos + 1)
        fields = raw[pos + 1:end].decode("ascii").split()
        name, ndim = fields[0], int(fields[1])
        shape = tuple(int(s) for s in fields[2:2 + ndim])
        size = int(np.prod(shape)) * 8
        out[name] = np.frombuffer(raw[end + 1:end + 1 + size], dtype="<f8").reshape(shape).copy()
        pos = end + size
    return out


def load_checkpoint(path) -> tuple[SIGER, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    model = SIGER(manifest["n_users"], manifest["n_items"], manifest["feature_dims"],
                  ModelHyper(**manifest["hyper"]))
    state = {k: torch.from_numpy(v) for k, v in read_tensors(path).items()}
    model.load_state_dict(state)
    return model, manifest
