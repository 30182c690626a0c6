"""Learnable parts of the pipeline.

Layout convention: feature-major, i.e. a set of ``n`` items with ``f``
features is an ``f x n`` tensor, and a linear layer computes ``W x + b``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .graphgen import AssignmentGraph


@dataclass
class NetworkConfig:
    encoder_widths: list[int] = field(default_factory=lambda: [64, 128])
    deform_point_widths: list[int] = field(default_factory=lambda: [64, 128])
    deform_head_widths: list[int] = field(default_factory=lambda: [128])
    latent: int = 32
    rounds: int = 3
    score_hidden: int = 32
    residual: bool = True
    operator_noise: float = 0.01
    # initial match probability; the score bias starts at its logit
    score_prior: float = 0.1
    # graph-level attribute seeded from the 2D global feature
    global_attribute: bool = True
    # node updates also see the mean state of their row and column of X
    row_column_context: bool = True

    def __post_init__(self):
        if not 0.0 < self.score_prior < 1.0:
            raise ValueError("score_prior must lie in (0, 1)")
        if self.rounds < 1:
            raise ValueError("graph network needs at least one round")
        if not self.encoder_widths or not self.deform_point_widths:
            raise ValueError("MLP width lists must be non-empty")

    @property
    def global_dim(self) -> int:
        return self.encoder_widths[-1]

    def to_dict(self) -> dict:
        return asdict(self)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str, zero=False):
        if zero:
            w = np.zeros((n_out, n_in))
        else:
            bound = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
        self.weight = ad.Parameter(w, name=f"{name}.weight")
        self.bias = ad.Parameter(np.zeros((n_out, 1)), name=f"{name}.bias")

    def __call__(self, x: ad.Tensor, extra=None, activation=None) -> ad.Tensor:
        return ad.dense(self.weight, x, self.bias, extra, activation)

    def parameters(self) -> list[ad.Parameter]:
        return [self.weight, self.bias]


class MLP:
    """Stack of linear layers with ReLU between them.

    ``final_activation`` applies ReLU after the last layer too;
    ``zero_last`` zero-initialises the last layer.
    """

    def __init__(
        self,
        widths: list[int],
        rng: np.random.Generator,
        name: str,
        final_activation: bool = True,
        zero_last: bool = False,
    ):
        self.layers = [
            Linear(a, b, rng, f"{name}.{i}", zero=zero_last and i == len(widths) - 2)
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.final_activation = final_activation

    def _activation(self, i: int):
        return "relu" if i < len(self.layers) - 1 or self.final_activation else None

    def __call__(self, x: ad.Tensor, extra=None) -> ad.Tensor:
        """Apply the stack; ``extra`` is added to the first layer's pre-activation."""
        for i, layer in enumerate(self.layers):
            x = layer(x, extra if i == 0 else None, self._activation(i))
        return x

    def tail(self, first: ad.Tensor) -> ad.Tensor:
        """Apply layers after the first to the given first-layer output."""
        x = first
        for i, layer in enumerate(self.layers[1:], start=1):
            x = layer(x, None, self._activation(i))
        return x

    def parameters(self) -> list[ad.Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class PointEncoder:
    """Shared per-point MLP followed by a max over points."""

    def __init__(self, widths: list[int], rng: np.random.Generator):
        self.mlp = MLP([2, *widths], rng, "encoder")

    def __call__(self, points: ad.Tensor) -> ad.Tensor:
        if points.shape[1] < 1:
            raise ValueError("encoder needs at least one point")
        return ad.max_pool_over_points(self.mlp(points))

    def parameters(self) -> list[ad.Parameter]:
        return self.mlp.parameters()


class DeformationModule:
    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.point_mlp = MLP([3, *config.deform_point_widths], rng, "deform.point")
        n_in = config.deform_point_widths[-1] + config.global_dim
        self.head = MLP(
            [n_in, *config.deform_head_widths, 3],
            rng,
            "deform.head",
            final_activation=False,
            zero_last=True,
        )
        self.global_dim = config.global_dim

    def __call__(self, universe: ad.Tensor, global_feature: ad.Tensor) -> ad.Tensor:
        """Per-point offsets (3 x d) for universe points given as 3 x d."""
        if global_feature.shape != (self.global_dim, 1):
            raise ad.ShapeError(
                f"global feature must be {self.global_dim} x 1, got {global_feature.shape}"
            )
        if universe.shape[0] != 3 or universe.shape[1] < 4:
            raise ad.ShapeError(f"universe must be 3 x d with d >= 4, got {universe.shape}")
        d = universe.shape[1]
        per_point = self.point_mlp(universe)
        broadcast = ad.take(global_feature, np.zeros(d, dtype=np.intp), axis=1)
        return self.head(ad.concat([per_point, broadcast], axis=0))

    def parameters(self) -> list[ad.Parameter]:
        return self.point_mlp.parameters() + self.head.parameters()


def _column_blocks(weight: ad.Tensor, sizes: list[int]) -> list[ad.Tensor]:
    bounds = np.cumsum([0, *sizes])
    return [ad.columns(weight, a, b) for a, b in zip(bounds[:-1].tolist(), bounds[1:].tolist())]


@dataclass
class Topology:
    """Directed edge list of a graph with cached gather/aggregation operators."""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    rows: np.ndarray | None = None  # row of X for each node
    cols: np.ndarray | None = None  # column of X for each node

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.intp)
        self.dst = np.asarray(self.dst, dtype=np.intp)
        self.gather_src = ad.Gather(self.src, self.n_nodes)
        self.gather_dst = ad.Gather(self.dst, self.n_nodes)
        self.incoming = ad.Segments(self.dst, self.n_nodes)
        own = np.arange(self.n_nodes)
        rows = own if self.rows is None else np.asarray(self.rows, dtype=np.intp)
        cols = own if self.cols is None else np.asarray(self.cols, dtype=np.intp)
        self.groups = [ad.Segments(g, int(g.max()) + 1 if len(g) else 0) for g in (rows, cols)]

    @property
    def n_edges(self) -> int:
        return len(self.src)


class GraphMatchingNet:
    """Edge/node message passing over the assignment graph with a sigmoid node head.

    Every undirected assignment edge is run in both directions; a node
    averages the latents of its incoming directed edges (zero if isolated).
    The first layer of each edge MLP acts on a concatenation of per-node
    quantities, so it is evaluated per node and then gathered onto edges.
    """

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        L = config.latent
        self.latent = L
        self.node_encoder = MLP([5, L], rng, "gm.node_enc")
        self.edge_encoder = MLP([10, L], rng, "gm.edge_enc")
        self.use_global = config.global_attribute
        G = L if self.use_global else 0
        self.global_dim = config.global_dim
        self.edge_updates = [
            MLP([3 * L + G, L, L], rng, f"gm.edge{r}") for r in range(config.rounds)
        ]
        self.use_context = config.row_column_context
        C = 2 * L if self.use_context else 0
        self.node_updates = [
            MLP([2 * L + C + G, L, L], rng, f"gm.node{r}") for r in range(config.rounds)
        ]
        if self.use_global:
            self.global_init = MLP([config.global_dim, L], rng, "gm.global_init")
            self.global_updates = [
                MLP([3 * L, L, L], rng, f"gm.global{r}") for r in range(config.rounds)
            ]
        self.score = MLP([L, config.score_hidden, 1], rng, "gm.score", final_activation=False)
        prior = config.score_prior
        self.score.layers[-1].bias.data[...] = np.log(prior / (1.0 - prior))
        self.residual = config.residual

    def _initial_global(self, global_feature) -> ad.Tensor | None:
        if not self.use_global:
            return None
        if global_feature is None:
            global_feature = ad.constant(np.zeros((self.global_dim, 1)))
        return self.global_init(global_feature)

    def _rounds(self, h: ad.Tensor, e: ad.Tensor | None, topo: Topology, g=None) -> ad.Tensor:
        L = self.latent
        for r, (edge_mlp, node_mlp) in enumerate(zip(self.edge_updates, self.node_updates)):
            if e is not None and topo.n_edges:
                first = edge_mlp.layers[0]
                blocks = _column_blocks(first.weight, [L, L, L] + ([L] if g is not None else []))
                w_edge, w_src, w_dst = blocks[:3]
                bias = first.bias if g is None else ad.add(first.bias, ad.matmul(blocks[3], g))
                endpoints = ad.gather_sum(
                    [(ad.matmul(w_src, h), topo.gather_src), (ad.matmul(w_dst, h), topo.gather_dst)]
                )
                e = edge_mlp.tail(ad.dense(w_edge, e, bias, endpoints, edge_mlp._activation(0)))
                agg = ad.segment_mean(e, topo.incoming)
            else:
                agg = ad.constant(np.zeros(h.shape))
            parts = [h, agg]
            if self.use_context:
                for seg in topo.groups:
                    parts.append(ad.take(ad.segment_mean(h, seg), seg.gather))
            x = ad.concat(parts, axis=0)
            if g is None:
                update = node_mlp(x)
            else:
                first = node_mlp.layers[0]
                w_x, w_g = _column_blocks(first.weight, [x.shape[0], L])
                bias = ad.add(first.bias, ad.matmul(w_g, g))
                update = node_mlp.tail(ad.dense(w_x, x, bias, None, node_mlp._activation(0)))
            h = ad.add(h, update) if self.residual else update
            if g is not None:
                n = h.shape[1]
                h_mean = ad.matmul(h, np.full((n, 1), 1.0 / n))
                if e is not None and topo.n_edges:
                    e_mean = ad.matmul(e, np.full((topo.n_edges, 1), 1.0 / topo.n_edges))
                else:
                    e_mean = ad.constant(np.zeros((L, 1)))
                g = self.global_updates[r](ad.concat([h_mean, e_mean, g], axis=0))
        return h

    def propagate(
        self,
        node_attr: ad.Tensor,
        edge_attr: ad.Tensor,
        src: np.ndarray,
        dst: np.ndarray,
        global_feature=None,
        rows: np.ndarray | None = None,
        cols: np.ndarray | None = None,
    ) -> ad.Tensor:
        """Per-node logits (1 x n) for explicit attributes and directed edges ``src -> dst``."""
        topo = Topology(node_attr.shape[1], src, dst, rows, cols)
        h = self.node_encoder(node_attr)
        e = self.edge_encoder(edge_attr) if topo.n_edges else None
        return self.score(self._rounds(h, e, topo, self._initial_global(global_feature)))

    def __call__(
        self,
        ag: AssignmentGraph,
        points_2d: ad.Tensor,
        points_3d: ad.Tensor,
        global_feature: ad.Tensor | None = None,
    ) -> tuple[ad.Tensor, ad.Tensor]:
        """Return (per-node probabilities 1 x m*d, soft matching m x d).

        ``points_2d`` (2 x m) and ``points_3d`` (3 x d) supply the attribute
        values so gradients reach the (deformed) universe points.
        """
        m, d = ag.m, ag.d
        rows = ad.Gather(ag.node_rows, m)
        cols = ad.Gather(ag.node_cols, d)
        node_attr = ad.concat([ad.take(points_2d, rows), ad.take(points_3d, cols)], axis=0)
        h = self.node_encoder(node_attr)
        i, j = ag.pairs_2d.T
        k, l = ag.pairs_3d.T
        p, q = ag.edges.T
        topo = Topology(
            ag.n_nodes, np.concatenate([p, q]), np.concatenate([q, p]), ag.node_rows, ag.node_cols
        )
        e = None
        if topo.n_edges:
            # edge attribute (v_src, v_dst, u_src, u_dst), one block per endpoint
            first = self.edge_encoder.layers[0]
            a, b, c, f = _column_blocks(first.weight, [2, 2, 3, 3])
            s2, d2 = np.concatenate([i, j]), np.concatenate([j, i])
            s3, d3 = np.concatenate([k, l]), np.concatenate([l, k])
            pre = ad.gather_sum(
                [
                    (ad.matmul(a, points_2d), s2),
                    (ad.matmul(b, points_2d), d2),
                    (ad.add(ad.matmul(c, points_3d), first.bias), s3),
                    (ad.matmul(f, points_3d), d3),
                ]
            )
            act = self.edge_encoder._activation(0)
            e = self.edge_encoder.tail(ad.relu(pre) if act == "relu" else pre)
        g = self._initial_global(global_feature)
        probs = ad.sigmoid(self.score(self._rounds(h, e, topo, g)))
        return probs, ad.reshape(probs, (m, d))

    def parameters(self) -> list[ad.Parameter]:
        params = self.node_encoder.parameters() + self.edge_encoder.parameters()
        for e, n in zip(self.edge_updates, self.node_updates):
            params += e.parameters() + n.parameters()
        if self.use_global:
            params += self.global_init.parameters()
            for mlp in self.global_updates:
                params += mlp.parameters()
        return params + self.score.parameters()


class UniverseModel:
    """Per-category universe points plus every network weight.

    ``categories`` maps category id to its universe size ``d``.
    """

    def __init__(self, categories: dict[int, int], config: NetworkConfig | None = None, seed=0):
        self.config = config or NetworkConfig()
        self.categories = dict(sorted(categories.items()))
        rng = np.random.default_rng(seed)
        self.universe: dict[int, ad.Parameter] = {}
        for cat, d in self.categories.items():
            if d < 4:
                raise ValueError(f"category {cat} needs d >= 4 universe points, got {d}")
            self.universe[cat] = ad.Parameter(
                rng.uniform(-0.5, 0.5, size=(3, d)), name=f"universe.{cat}"
            )
        g = self.config.global_dim
        self.operators = {
            cat: ad.Parameter(
                np.eye(g) + rng.normal(0.0, self.config.operator_noise, size=(g, g)),
                name=f"operator.{cat}",
            )
            for cat in self.categories
        }
        self.encoder = PointEncoder(self.config.encoder_widths, rng)
        self.deformation = DeformationModule(self.config, rng)
        self.matcher = GraphMatchingNet(self.config, rng)

    def universe_parameters(self) -> list[ad.Parameter]:
        return list(self.universe.values())

    def parameters(self) -> list[ad.Parameter]:
        return (
            self.universe_parameters()
            + list(self.operators.values())
            + self.encoder.parameters()
            + self.deformation.parameters()
            + self.matcher.parameters()
        )

    def named_parameters(self) -> dict[str, ad.Parameter]:
        return {p.name: p for p in self.parameters()}

    def encode(self, points_2d, category: int) -> ad.Tensor:
        """Category-specific global feature (g x 1) of normalised 2 x m keypoints."""
        if category not in self.operators:
            raise KeyError(f"unknown category id {category}")
        return ad.matmul(self.operators[category], self.encoder(ad.constant(points_2d)))

    def offsets(self, category: int, global_feature: ad.Tensor) -> ad.Tensor:
        return self.deformation(self.universe[category], global_feature)
