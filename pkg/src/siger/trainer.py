"""Batching, optimisation, early stopping, ablation variants and sweeps."""

from __future__ import annotations

import copy
import csv
import io
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .dataset import DatasetSplit, ModalityFeatureMatrix
from .evaluation import MetricReport, evaluate
from .graphs import GraphConfig, GraphSet, build_graphs
from .losses import BatchTriples, LossBreakdown, LossWeights, NonFiniteLossError, batch_objective, total_loss
from .model import SIGER, GraphTensors, ModelHyper, feature_tensors
from .rng import substream, torch_substream

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no-eisg", "no-mp", "no-da", "no-modulus-weight", "standard-infonce",
            "text-only", "image-only")
COMPONENT_VARIANTS = VARIANTS[:6]
MODALITY_VARIANTS = ("full", "text-only", "image-only")
VARIANT_LABELS = {"full": "SIGER", "no-eisg": "SIGER/EISG", "no-mp": "SIGER/MP", "no-da": "SIGER/DA",
                  "no-modulus-weight": "SIGER-MP*", "standard-infonce": "SIGER-DA*",
                  "text-only": "SIGER/V", "image-only": "SIGER/T"}

HISTORY_FIELDS = ["epoch", "bpr", "l_p", "l_mm_u", "l_mm_i", "l_bm", "l2", "total"]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 20
    seed: int = 0
    loss: LossWeights = LossWeights()
    model: ModelHyper = ModelHyper()
    graph: GraphConfig = GraphConfig()
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    deterministic: bool = True
    modalities: tuple[str, ...] = ("t", "v")
    variant: str = "full"
    eval_ks: tuple[int, ...] = (10, 20)

    def __post_init__(self):
        if self.lr < 0 or self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("invalid training configuration")
        if not self.modalities or any(m not in ("v", "t") for m in self.modalities):
            raise ValueError("modalities must be a non-empty subset of ('v', 't')")
        if 20 not in self.eval_ks:
            raise ValueError("early stopping monitors R@20, so eval_ks must include 20")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossWeights(**d.get("loss", {}))
        d["model"] = ModelHyper(**d.get("model", {}))
        d["graph"] = GraphConfig(**d.get("graph", {}))
        for key in ("betas", "modalities", "eval_ks"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def apply_ablation(config: TrainConfig, variant: str) -> TrainConfig:
    """Configuration for one ablation variant of an otherwise full configuration."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
    if variant == "full":
        return config
    if config.variant != "full":
        raise ValueError(f"config is already the {config.variant!r} variant; variants do not combine")
    if variant in ("no-modulus-weight", "no-mp") and config.loss.lambda_p == 0:
        raise ValueError(f"{variant} requires an active perturbation term (lambda_p > 0)")
    if variant in ("standard-infonce", "no-da") and config.loss.lambda_a == 0:
        raise ValueError(f"{variant} requires an active alignment term (lambda_a > 0)")
    if variant in ("standard-infonce", "text-only", "image-only") and len(config.modalities) < 2:
        raise ValueError(f"{variant} requires both modalities")
    c = replace(config, variant=variant)
    if variant == "no-eisg":
        return replace(c, graph=replace(c.graph, beta=0.0))
    if variant == "no-mp":
        return replace(c, loss=replace(c.loss, lambda_p=0.0))
    if variant == "no-da":
        return replace(c, loss=replace(c.loss, lambda_a=0.0))
    if variant == "no-modulus-weight":
        return replace(c, model=replace(c.model, uniform_perturbation=True))
    if variant == "standard-infonce":
        return replace(c, loss=replace(c.loss, alignment="standard"))
    keep = ("t",) if variant == "text-only" else ("v",)
    return replace(c, modalities=keep, loss=replace(c.loss, alignment="none"))


def sample_bpr_batch(train: np.ndarray, n_items: int, batch_size: int, rng: np.random.Generator,
                     train_keys: np.ndarray | None = None) -> BatchTriples:
    """Uniform positives (with replacement) and rejection-sampled uniform negatives."""
    if train_keys is None:
        train_keys = np.sort(train[:, 0] * n_items + train[:, 1])
    idx = rng.integers(0, len(train), size=batch_size)
    users, pos = train[idx, 0], train[idx, 1]
    full = np.bincount(train[:, 0])[users] >= n_items
    if full.any():
        raise ValueError(f"user {int(users[full][0])} interacted with every item; no negative exists")
    neg = rng.integers(0, n_items, size=batch_size)
    while True:
        keys = users * n_items + neg
        loc = np.minimum(np.searchsorted(train_keys, keys), len(train_keys) - 1)
        bad = train_keys[loc] == keys
        if not bad.any():
            break
        neg[bad] = rng.integers(0, n_items, size=int(bad.sum()))
    return BatchTriples(users.astype(np.int64), pos.astype(np.int64), neg.astype(np.int64))


@dataclass
class PreparedData:
    split: DatasetSplit
    features: dict[str, ModalityFeatureMatrix]

    def feature_arrays(self, modalities) -> dict[str, np.ndarray]:
        return {m: self.features[m].data for m in modalities}


@dataclass
class TrainState:
    model: SIGER
    optimizer: torch.optim.Optimizer
    batch_rng: np.random.Generator
    perturb_gen: torch.Generator
    epoch: int = 0
    best_valid: float = -math.inf
    since_best: int = 0


@dataclass
class FitResult:
    model: SIGER
    history: list[dict]
    best_epoch: int
    best_valid: float
    graphs: GraphSet
    config: TrainConfig

    def history_csv(self) -> str:
        return history_csv(self.history)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    if history:
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(history[0]))
        for row in history:
            writer.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in row.values()])
    return buf.getvalue()


def set_deterministic(flag: bool) -> None:
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def make_state(n_users: int, n_items: int, feature_dims: dict[str, int], config: TrainConfig) -> TrainState:
    model = SIGER(n_users, n_items, feature_dims, config.model, seed=config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas, eps=config.adam_eps)
    return TrainState(model, opt, substream(config.seed, "batching"),
                      torch_substream(config.seed, "perturbation"))


def train_epoch(state: TrainState, train: np.ndarray, graphs: GraphTensors,
                features: dict[str, torch.Tensor], config: TrainConfig) -> LossBreakdown:
    """One pass of ceil(|train| / batch) sampled batches; returns mean components."""
    model = state.model
    model.train()
    n_items = model.n_items
    keys = np.sort(train[:, 0] * n_items + train[:, 1])
    n_batches = max(1, math.ceil(len(train) / config.batch_size))
    sums = dict.fromkeys(LossBreakdown().as_dict(), 0.0)
    for _ in range(n_batches):
        batch = sample_bpr_batch(train, n_items, config.batch_size, state.batch_rng, keys)
        state.optimizer.zero_grad(set_to_none=True)
        value, comps = batch_objective(model, graphs, features, batch, config.loss, state.perturb_gen)
        try:
            parts = total_loss({k: v.detach() for k, v in comps.items()}, config.loss)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(
                f"epoch {state.epoch + 1}: {exc}; batch users={batch.users.tolist()[:20]} "
                f"pos={batch.pos.tolist()[:20]} neg={batch.neg.tolist()[:20]}") from exc
        value.backward()
        state.optimizer.step()
        for k, v in parts.as_dict().items():
            sums[k] += v
    state.epoch += 1
    return LossBreakdown(**{k: v / n_batches for k, v in sums.items()})


def prepare_graphs(data: PreparedData, config: TrainConfig, cache_dir=None) -> GraphSet:
    split = data.split
    return build_graphs(split.train, split.n_users, split.n_items, data.feature_arrays(config.modalities),
                        config.graph, cache_dir)


def fit(data: PreparedData, config: TrainConfig, variant: str | None = None, cache_dir=None,
        graphs: GraphSet | None = None, validate=None) -> FitResult:
    """Train with early stopping on validation R@20.

    ``validate(model, graph_tensors, feature_tensors) -> MetricReport`` can
    replace the built-in validation pass.
    """
    if variant is not None:
        config = apply_ablation(config, variant)
    set_deterministic(config.deterministic)
    split = data.split
    graphs = graphs if graphs is not None else prepare_graphs(data, config, cache_dir)
    gt = GraphTensors.from_graphs(graphs)
    feats = feature_tensors({m: data.features[m] for m in config.modalities})
    state = make_state(split.n_users, split.n_items, {m: f.shape[1] for m, f in feats.items()}, config)
    if validate is None:
        def validate(model, g, f):
            return evaluate(model, g, f, split, "valid", config.eval_ks, config.variant)

    history, best_state, best_epoch = [], copy.deepcopy(state.model.state_dict()), 0
    while state.epoch < config.max_epochs:
        parts = train_epoch(state, split.train, gt, feats, config)
        state.model.eval()
        report = validate(state.model, gt, feats)
        r20 = report.recall[20] if report.recall.get(20) is not None else 0.0
        row = {"epoch": state.epoch, "bpr": parts.bpr, "l_p": parts.l_p, "l_mm_u": parts.l_mm_user,
               "l_mm_i": parts.l_mm_item, "l_bm": parts.l_bm, "l2": parts.l2, "total": parts.total}
        row.update({f"valid_{k}": (0.0 if v is None else v) for k, v in report.columns().items()})
        history.append(row)
        if r20 > state.best_valid:
            state.best_valid, state.since_best, best_epoch = r20, 0, state.epoch
            best_state = copy.deepcopy(state.model.state_dict())
        else:
            state.since_best += 1
            if state.since_best >= config.patience:
                logger.info("early stop at epoch %d (best %d, R@20 %.4f)", state.epoch, best_epoch,
                            state.best_valid)
                break
    state.model.load_state_dict(best_state)
    state.model.eval()
    return FitResult(state.model, history, best_epoch, state.best_valid, graphs, config)


def evaluate_fit(result: FitResult, data: PreparedData, part: str = "test") -> MetricReport:
    gt = GraphTensors.from_graphs(result.graphs)
    feats = feature_tensors({m: data.features[m] for m in result.config.modalities})
    return evaluate(result.model, gt, feats, data.split, part, result.config.eval_ks, result.config.variant)


SWEEP_KEYS = {
    "beta": ("graph", "beta", float), "kc": ("graph", "kc", int), "km": ("graph", "km", int),
    "tau0": ("loss", "tau0", float), "tau1": ("loss", "tau1", float), "tau2": ("loss", "tau2", float),
    "lambda_p": ("loss", "lambda_p", float), "lambda_a": ("loss", "lambda_a", float),
    "layers_ii": ("model", "layers_ii", int), "layers_ui": ("model", "layers_ui", int),
    "epsilon": ("model", "epsilon", float),
}


def with_setting(config: TrainConfig, key: str, value) -> TrainConfig:
    section, name, cast = SWEEP_KEYS[key]
    return replace(config, **{section: replace(getattr(config, section), **{name: cast(value)})})


def _sweep_point(data: PreparedData, config: TrainConfig, setting: dict, cache_dir) -> dict:
    for k, v in setting.items():
        config = with_setting(config, k, v)
    result = fit(data, config, cache_dir=cache_dir)
    test = evaluate_fit(result, data, "test")
    best = result.history[result.best_epoch - 1] if result.best_epoch else {}
    row = dict(setting)
    row.update({"best_epoch": result.best_epoch, "graph_key": result.graphs.key})
    row.update({f"valid_{k}": best.get(f"valid_{k}", 0.0) for k in test.columns()})
    row.update({f"test_{k}": v for k, v in test.columns().items()})
    return row


def sweep(grid: dict[str, list], data: PreparedData, config: TrainConfig, cache_dir=None,
          jobs: int = 1) -> list[dict]:
    """One fit per grid point; rows sorted by validation R@20, best first.

    Graphs are rebuilt (or fetched from ``cache_dir``) per point. With
    ``jobs > 1`` points run in separate processes, each with its own state.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep grid is empty")
    unknown = set(grid) - set(SWEEP_KEYS)
    if unknown:
        raise ValueError(f"unknown sweep keys: {sorted(unknown)}")
    keys = list(grid)
    settings = [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]
    # reject bad values before any training starts
    for setting in settings:
        cfg = config
        for k, v in setting.items():
            cfg = with_setting(cfg, k, v)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_point, *zip(*[(data, config, s, cache_dir) for s in settings])))
    else:
        rows = [_sweep_point(data, config, s, cache_dir) for s in settings]
    rows.sort(key=lambda r: -r["valid_R@20"])
    return rows


def rows_csv(rows: list[dict]) -> str:
    return history_csv(rows)
