"""Loss terms, warm-start schedule, optimiser and the training loop."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .dataset import DatasetManifest, KeypointInstance
from .geometry import ProjectedPoints, canonical_rotation, homogenize, homogenize_tensor
from .geometry import normalize_keypoints
from .geometry import reconstruction_residual
from .graphgen import Graph2D, UniverseGraph3D, build_assignment_graph, delaunay_2d, edges_3d
from .matching import extract_matching, matching_accuracy
from .network import NetworkConfig, UniverseModel

log = logging.getLogger(__name__)

COMPONENTS = ("match", "deform", "rec", "off", "reg")


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; ``state`` is the last good state."""

    def __init__(self, iteration: int, state: "TrainState"):
        super().__init__(f"training diverged at iteration {iteration}: non-finite loss")
        self.iteration = iteration
        self.state = state


@dataclass
class LossWeights:
    match: float = 0.0
    deform: float = 0.0
    rec: float = 0.0
    off: float = 0.0
    reg: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v >= 0:
                raise ValueError(f"loss weight {f.name} must be >= 0, got {v}")

    @classmethod
    def warm_start(cls) -> "LossWeights":
        return cls(rec=1.0)

    @classmethod
    def main_phase(cls) -> "LossWeights":
        return cls(match=1.0, deform=0.5, rec=0.0, off=0.05, reg=0.1)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass
class Schedule:
    """Iteration counts include the warm start: ``total_iterations`` covers both phases."""

    warm_start_iterations: int = 4000
    total_iterations: int = 150000
    batch_size: int = 16
    initial_lr: float = 0.008
    decay_factor: float = 0.98
    decay_every: int = 3000

    def __post_init__(self):
        if self.total_iterations < 0 or self.warm_start_iterations < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.total_iterations > 0 and self.warm_start_iterations >= self.total_iterations:
            raise ValueError("warm start must be shorter than the total iteration count")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay factor must lie in (0, 1]")
        if self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("batch size and decay interval must be positive")
        if not self.initial_lr > 0:
            raise ValueError("learning rate must be positive")

    def lr_at(self, iteration: int) -> float:
        return self.initial_lr * self.decay_factor ** (iteration // self.decay_every)


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    deformation: bool = True
    freeze_universe_graph: bool = False
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threads: int = 1
    log_every: int = 50
    cond_cap: float = 1e8
    # rotate keypoints onto their principal axes before matching
    canonical_rotation: bool = True
    # per-keypoint drop probability applied to main-phase training samples
    augment_occlusion: float = 0.0

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig(**self.network)
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not 0.0 <= self.augment_occlusion < 1.0:
            raise ValueError("augment_occlusion must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# --- per-instance data and forward pass ---------------------------------------


def build_sum_operator(m: int, d: int) -> np.ndarray:
    """Stacked row-sum / column-sum selector acting on column-major ``vec(X)``.

    ``B @ vec(X) == concat(X.sum(1), X.sum(0))`` for an ``m x d`` matrix X.
    """
    if m < 1 or d < 1:
        raise ValueError("m and d must be positive")
    B = np.zeros((m + d, m * d))
    for k in range(d):
        for i in range(m):
            pos = k * m + i  # column-major position of X[i, k]
            B[i, pos] = 1.0
            B[m + k, pos] = 1.0
    return B


def vec(X: np.ndarray) -> np.ndarray:
    """Column-major vectorisation."""
    return np.asarray(X).T.reshape(-1)


@dataclass
class PreparedInstance:
    """Normalised, graph-ready view of one labelled :class:`KeypointInstance`."""

    id: str
    category: int
    d: int
    points: np.ndarray  # 2 x m normalised
    labels: np.ndarray | None
    edges_2d: list

    @classmethod
    def from_points(cls, id, category, d, points, labels=None, seed=0, canonical=True):
        """Normalise 2 x m ``points`` (optionally rotation-canonicalised) and build edges."""
        pts = normalize_keypoints(ProjectedPoints(points))[0].v
        if canonical:
            pts = normalize_keypoints(ProjectedPoints(canonical_rotation(pts) @ pts))[0].v
        edges = delaunay_2d(pts.T, seed) if pts.shape[1] >= 2 else []
        labels = None if labels is None else np.asarray(labels, dtype=np.intp)
        return cls(id, category, d, pts, labels, edges)

    @classmethod
    def from_instance(
        cls, inst: KeypointInstance, category: int, d: int, seed: int = 0, canonical: bool = True
    ):
        return cls.from_points(
            inst.id, category, d, inst.keypoints.T, inst.labels, seed, canonical
        )

    def subset(self, keep: np.ndarray, seed: int = 0, canonical: bool = True):
        """The same instance observed only at keypoints ``keep`` (renormalised)."""
        keep = np.asarray(keep, dtype=np.intp)
        labels = None if self.labels is None else self.labels[keep]
        return PreparedInstance.from_points(
            self.id, self.category, self.d, self.points[:, keep], labels, seed, canonical
        )

    @property
    def m(self) -> int:
        return self.points.shape[1]

    @cached_property
    def homogeneous(self) -> np.ndarray:
        return homogenize(self.points)

    @cached_property
    def gt_matching(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError(f"instance {self.id!r} has no ground-truth labels")
        X = np.zeros((self.m, self.d))
        X[np.arange(self.m), self.labels] = 1.0
        return X

    @cached_property
    def sum_operator(self) -> np.ndarray:
        return build_sum_operator(self.m, self.d)


def prepare_instances(
    manifest: DatasetManifest,
    instances: Sequence[KeypointInstance] | None = None,
    seed: int = 0,
    canonical: bool = True,
    category_index: dict[str, int] | None = None,
) -> list[PreparedInstance]:
    """Normalise instances; ``category_index`` maps names to model ids (default: file order)."""
    index = manifest.category_index() if category_index is None else category_index
    sizes = manifest.category_sizes()
    insts = manifest.instances if instances is None else instances
    return [
        PreparedInstance.from_instance(
            inst, index[inst.category], sizes[inst.category], seed, canonical
        )
        for inst in insts
    ]


@dataclass
class ForwardOptions:
    deformation: bool = True
    freeze_universe_graph: bool = False
    cond_cap: float = 1e8
    seed: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "ForwardOptions":
        return cls(cfg.deformation, cfg.freeze_universe_graph, cfg.cond_cap)


class InstanceForward:
    """Lazily evaluated pipeline for one instance; each stage runs at most once."""

    def __init__(self, model: UniverseModel, inst: PreparedInstance, options: ForwardOptions):
        self.model = model
        self.inst = inst
        self.options = options

    @cached_property
    def universe(self) -> ad.Parameter:
        return self.model.universe[self.inst.category]

    @cached_property
    def global_feature(self) -> ad.Tensor:
        return self.model.encode(self.inst.points, self.inst.category)

    @cached_property
    def offsets(self) -> ad.Tensor:
        if not self.options.deformation:
            return ad.constant(np.zeros((3, self.inst.d)))
        return self.model.offsets(self.inst.category, self.global_feature)

    @cached_property
    def deformed(self) -> ad.Tensor:
        if not self.options.deformation:
            return self.universe
        return ad.add(self.universe, self.offsets)

    @cached_property
    def assignment_graph(self):
        g2 = Graph2D(self.inst.points.T, self.inst.edges_2d)
        src = self.universe if self.options.freeze_universe_graph else self.deformed
        pts3 = src.data.T
        g3 = UniverseGraph3D(pts3, edges_3d(pts3, self.options.seed))
        return build_assignment_graph(g2, g3)

    @cached_property
    def matching(self) -> tuple[ad.Tensor, ad.Tensor]:
        return self.model.matcher(
            self.assignment_graph,
            ad.constant(self.inst.points),
            self.deformed,
            self.global_feature,
        )

    @property
    def soft_matching(self) -> ad.Tensor:
        return self.matching[1]

    def _residual(self, points3: ad.Tensor) -> ad.Tensor:
        if self.inst.labels is None:
            raise ValueError(f"instance {self.inst.id!r} needs labels for reconstruction losses")
        U = homogenize_tensor(ad.take(points3, self.inst.labels))
        return reconstruction_residual(U, self.inst.homogeneous, self.options.cond_cap)

    def rec(self) -> ad.Tensor:
        return self._residual(self.universe)

    def deform(self) -> ad.Tensor:
        return self._residual(self.deformed)

    def off(self) -> ad.Tensor:
        return ad.frobenius_sq(self.offsets)

    def match(self) -> ad.Tensor:
        return ad.frobenius_sq(ad.subtract(self.inst.gt_matching, self.soft_matching))

    def reg(self, hard: bool = False) -> ad.Tensor:
        X = self.soft_matching
        if hard:
            y = ad.constant((vec(X.data) > 0.5).astype(np.float64)[:, None])
        else:
            y = ad.reshape(ad.transpose(X), (-1, 1))
        diff = ad.subtract(y, vec(self.inst.gt_matching)[:, None])
        return ad.frobenius_sq(ad.matmul(self.inst.sum_operator, diff))

    def component(self, name: str) -> ad.Tensor:
        return getattr(self, name)()


def _batch_mean(model, batch, options, name: str) -> ad.Tensor:
    if not batch:
        raise ValueError("empty batch")
    terms = [InstanceForward(model, inst, options).component(name) for inst in batch]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(batch))


def loss_rec(model, batch, options=None) -> ad.Tensor:
    return _batch_mean(model, batch, options or ForwardOptions(), "rec")


def loss_def(model, batch, options=None) -> ad.Tensor:
    return _batch_mean(model, batch, options or ForwardOptions(), "deform")


def loss_off(model, batch, options=None) -> ad.Tensor:
    return _batch_mean(model, batch, options or ForwardOptions(), "off")


def loss_match(model, batch, options=None) -> ad.Tensor:
    return _batch_mean(model, batch, options or ForwardOptions(), "match")


def loss_reg(model, batch, options=None, hard: bool = False) -> ad.Tensor:
    options = options or ForwardOptions()
    terms = [InstanceForward(model, inst, options).reg(hard=hard) for inst in batch]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(batch))


def instance_objective(
    fwd: InstanceForward, weights: LossWeights, batch_size: int
) -> tuple[ad.Tensor, dict[str, float]]:
    """This instance's share of the weighted batch loss; zero-weight terms are skipped."""
    total = None
    parts: dict[str, float] = {}
    for name in COMPONENTS:
        w = getattr(weights, name)
        if w == 0:
            continue
        term = fwd.component(name)
        parts[name] = term.item()
        scaled = ad.scale(term, w / batch_size)
        total = scaled if total is None else ad.add(total, scaled)
    if total is None:
        total = ad.constant(0.0)
    return total, parts


def total_loss(model, batch, weights: LossWeights, options=None) -> ad.Tensor:
    """Weighted sum of the batch-mean loss components as one scalar graph."""
    options = options or ForwardOptions()
    total = ad.constant(0.0)
    for inst in batch:
        part, _ = instance_objective(InstanceForward(model, inst, options), weights, len(batch))
        total = ad.add(total, part)
    return total


# --- optimiser ----------------------------------------------------------------


class Optimizer:
    """Adam (or plain SGD) over a fixed, ordered parameter list."""

    def __init__(self, params: list[ad.Parameter], kind="adam", beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.kind = kind
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        for p in self.params:
            g = p.grad
            if self.kind == "sgd":
                p.data -= lr * g
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainState:
    model: UniverseModel
    optimizer: Optimizer
    config: TrainConfig
    category_names: list[str]
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def initialize(
        cls, category_sizes: dict[str, int], config: TrainConfig | None = None, seed: int = 0
    ) -> "TrainState":
        config = config or TrainConfig()
        names = list(category_sizes)
        model = UniverseModel(
            {i: category_sizes[n] for i, n in enumerate(names)}, config.network, seed=seed
        )
        opt = Optimizer(model.parameters(), config.optimizer, config.beta1, config.beta2, config.eps)
        return cls(model, opt, config, names, 0, np.random.default_rng(seed + 1))


# --- training loop ------------------------------------------------------------


def _instance_grads(model, inst, weights, options, batch_size, want_accuracy):
    with ad.ComputationRecord() as rec:
        fwd = InstanceForward(model, inst, options)
        objective, parts = instance_objective(fwd, weights, batch_size)
        grads = rec.gradients(objective)
        acc = None
        if want_accuracy and ("match" in parts or "reg" in parts):
            acc = matching_accuracy(extract_matching(fwd.soft_matching.data), inst.gt_matching)
    return objective.item(), parts, grads, acc


MIN_VISIBLE = 4


def _occlude(inst: PreparedInstance, rng: np.random.Generator, config: TrainConfig):
    """Randomly hide keypoints; samples left with fewer than 4 are used unchanged."""
    keep = np.flatnonzero(rng.random(inst.m) >= config.augment_occlusion)
    if len(keep) == inst.m or len(keep) < MIN_VISIBLE:
        return inst
    return inst.subset(keep, canonical=config.canonical_rotation)


def train_step(
    state: TrainState,
    data: Sequence[PreparedInstance],
    schedule: Schedule,
    weights: LossWeights,
    warm_weights: LossWeights | None = None,
    pool: ThreadPoolExecutor | None = None,
    want_accuracy: bool = True,
) -> dict:
    """One optimisation step; returns the metrics record for this iteration."""
    t = state.iteration
    warm = t < schedule.warm_start_iterations
    active = (warm_weights or LossWeights.warm_start()) if warm else weights
    n = min(schedule.batch_size, len(data))
    idx = state.rng.choice(len(data), size=n, replace=False)
    batch = [data[i] for i in idx]
    if not warm and state.config.augment_occlusion > 0:
        batch = [_occlude(inst, state.rng, state.config) for inst in batch]
    options = ForwardOptions.from_config(state.config)
    params = state.optimizer.params
    for p in params:
        p.zero_grad()
    def run(inst):
        return _instance_grads(state.model, inst, active, options, n, want_accuracy)

    try:
        results = list(map(run, batch) if pool is None else pool.map(run, batch))
    except ad.NonFiniteError:
        raise TrainingDiverged(t, state) from None
    # fixed-order reduction keeps the sum independent of thread scheduling
    total = 0.0
    sums: dict[str, float] = {}
    accs = []
    for value, parts, grads, acc in results:
        total += value
        for key, v in parts.items():
            sums[key] = sums.get(key, 0.0) + v
        for param, g in grads.values():
            param.grad += g
        if acc is not None:
            accs.append(acc)
    finite = math.isfinite(total) and all(np.all(np.isfinite(p.grad)) for p in params)
    if not finite:
        raise TrainingDiverged(t, state)
    lr = schedule.lr_at(t)
    state.optimizer.step(lr)
    state.iteration += 1
    record = {"iteration": state.iteration, "phase": "warm" if warm else "main", "lr": lr}
    record["loss"] = total
    for key in COMPONENTS:
        record[key] = sums[key] / n if key in sums else None
    record["train_accuracy"] = float(np.mean(accs)) if accs else None
    return record


def train(
    data: Sequence[PreparedInstance],
    schedule: Schedule,
    weights: LossWeights | None = None,
    seed: int = 0,
    config: TrainConfig | None = None,
    state: TrainState | None = None,
    category_sizes: dict[str, int] | None = None,
    warm_weights: LossWeights | None = None,
    on_log: Callable[[dict], None] | None = None,
    checkpoint: Callable[[TrainState], None] | None = None,
    checkpoint_every: int = 0,
) -> tuple[TrainState, list[dict]]:
    """Run (or resume) training up to ``schedule.total_iterations``.

    Returns the final state and the metrics log (one record per
    ``config.log_every`` iterations plus the final one).
    """
    if not data:
        raise ValueError("training needs a non-empty dataset")
    weights = weights or LossWeights.main_phase()
    if state is None:
        if category_sizes is None:
            sizes: dict[int, int] = {}
            for inst in data:
                sizes[inst.category] = inst.d
            category_sizes = {f"cat{c}": sizes[c] for c in sorted(sizes)}
        state = TrainState.initialize(category_sizes, config, seed)
    for inst in data:
        if inst.labels is None:
            raise ValueError(f"training instance {inst.id!r} has no labels")
    records: list[dict] = []
    pool = ThreadPoolExecutor(state.config.threads) if state.config.threads > 1 else None
    try:
        while state.iteration < schedule.total_iterations:
            nxt = state.iteration + 1
            logged = nxt % state.config.log_every == 0 or nxt == schedule.total_iterations
            record = train_step(state, data, schedule, weights, warm_weights, pool, logged)
            it = state.iteration
            if it % state.config.log_every == 0 or it == schedule.total_iterations:
                records.append(record)
                if on_log is not None:
                    on_log(record)
            if checkpoint is not None and checkpoint_every and it % checkpoint_every == 0:
                checkpoint(state)
    finally:
        if pool is not None:
            pool.shutdown()
    return state, records
