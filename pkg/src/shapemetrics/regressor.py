"""Point-cloud regressor: kNN graph, EdgeConv stack, global max pooling,
and an MLP head emitting a positive mean plus a log-variance.

The graph is built once on the input xyz coordinates and kept static across
layers (cheaper than per-layer re-graphing and keeps permutation invariance
easy to reason about).  Volume and surface area use two fully independent
instances of this network — separate parameter sets, nothing shared.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .errors import ConfigError, DataError, NonFiniteError
from .seeding import derive_seed

# tie resolution in knn_graph is exact within this many extra candidates
_TIE_MARGIN = 8

MU_FLOOR = 1e-8


@dataclass(frozen=True)
class RegressorConfig:
    """Architecture hyperparameters.  Defaults follow the reference DGCNN
    sizing: k=30, five EdgeConv blocks, {512, 128} head, dropout 0.3."""

    k: int = 30
    edgeconv_channels: tuple = (64, 64, 128, 256, 256)
    mlp_hidden: tuple = (512, 128)
    dropout_p: float = 0.3
    leaky_slope: float = 0.2
    input_dim: int = 4

    def __post_init__(self):
        object.__setattr__(self, "edgeconv_channels", tuple(int(c) for c in self.edgeconv_channels))
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not self.edgeconv_channels:
            raise ConfigError("edgeconv_channels must be non-empty")
        if any(c < 1 for c in self.edgeconv_channels):
            raise ConfigError(f"edgeconv_channels must be positive, got {self.edgeconv_channels}")
        if any(h < 1 for h in self.mlp_hidden):
            raise ConfigError(f"mlp_hidden must be positive, got {self.mlp_hidden}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "edgeconv_channels": list(self.edgeconv_channels),
            "mlp_hidden": list(self.mlp_hidden),
            "dropout_p": self.dropout_p,
            "leaky_slope": self.leaky_slope,
            "input_dim": self.input_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressorConfig":
        return cls(**d)


def _scalar(x) -> float:
    return float(x.value) if isinstance(x, ad.Node) else float(x)


@dataclass(frozen=True)
class PredictionWithUncertainty:
    """One predicted metric: mean, log-variance, and a derived confidence.

    mu and log_var are floats after inference, autodiff Nodes during
    training (so the loss stays differentiable through them).
    """

    mu: object
    log_var: object

    def __post_init__(self):
        m, lv = _scalar(self.mu), _scalar(self.log_var)
        if not (math.isfinite(m) and math.isfinite(lv)):
            raise NonFiniteError(f"prediction not finite: mu={m!r} log_var={lv!r}")
        if m <= 0.0:
            raise DataError(f"predicted mu must be > 0, got {m}")

    @property
    def mu_value(self) -> float:
        return _scalar(self.mu)

    @property
    def log_var_value(self) -> float:
        return _scalar(self.log_var)

    @property
    def sigma(self) -> float:
        return math.exp(0.5 * self.log_var_value)

    @property
    def confidence(self) -> float:
        # monotone-decreasing reporting transform of the predicted variance
        return math.exp(-self.log_var_value)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


def knn_graph(points, k: int) -> np.ndarray:
    """Indices (N, k) of each point's k nearest other points.

    Self is excluded; exact ties resolve to the smaller index (guaranteed
    within a k+8 candidate window, which covers any realistic tie group).
    """
    if int(k) < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    k = int(k)
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"knn_graph: expected (N, 3) points, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise DataError("knn_graph: points contain non-finite values")
    n = pts.shape[0]
    if n <= k:
        raise DataError(f"knn_graph: need more than k={k} points, got {n}")

    k_query = min(n, k + 1 + _TIE_MARGIN)
    dist, idx = cKDTree(pts).query(pts, k=k_query)
    # push self to the back, then order by (distance, original index)
    dist = np.where(idx == np.arange(n)[:, None], np.inf, dist)
    order = np.lexsort((idx, dist), axis=1)
    return np.take_along_axis(idx, order[:, :k], axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def edgeconv(features, edges: np.ndarray, w, gamma, beta, slope: float = 0.2):
    """One EdgeConv block: per-edge message MLP([f_i || f_j - f_i]) through a
    shared no-bias linear + instance norm + leaky ReLU, max-pooled over the
    k neighbors.  Returns an (N, C_out) Node."""
    f = ad.wrap(features)
    if f.value.ndim != 2:
        raise DataError(f"edgeconv: expected (N, C) features, got {f.value.shape}")
    edges = np.asarray(edges, dtype=np.int64)
    if edges.ndim != 2 or edges.shape[0] != f.value.shape[0]:
        raise DataError(
            f"edgeconv: edges {edges.shape} do not match {f.value.shape[0]} points"
        )
    n, k = edges.shape
    idx_self = np.repeat(np.arange(n), k)
    fi = ad.gather_rows(f, idx_self)
    fj = ad.gather_rows(f, edges.reshape(-1))
    msg_in = ad.concat([fi, ad.sub(fj, fi)], axis=1)  # (N*k, 2C)
    lin = ad.matmul(msg_in, w)
    act = ad.leaky_relu(ad.instance_norm(lin, gamma, beta), slope)
    per_node = ad.reshape(act, (n, k, act.value.shape[1]))
    return ad.max_reduce(per_node, axis=1)


def _required_names(config: RegressorConfig) -> list:
    names = []
    for i in range(len(config.edgeconv_channels)):
        names += [f"edge{i}_w", f"edge{i}_gamma", f"edge{i}_beta"]
    for j in range(len(config.mlp_hidden)):
        names += [f"head{j}_w", f"head{j}_b"]
    names += ["out_w", "out_b"]
    return names


def forward(
    cloud,
    config: RegressorConfig,
    params: ad.ParamSet,
    train: bool = False,
    epoch_seed: int = 0,
    edges: np.ndarray = None,
) -> PredictionWithUncertainty:
    """Full network pass on one cloud (a FeatureCloud or raw (N, 4) array).

    Dropout fires only when train=True; its mask is a pure function of
    epoch_seed, so fixed seeds give bit-identical passes.  A precomputed
    knn_graph(xyz, config.k) may be passed as ``edges`` to skip the graph
    build on repeated passes over the same cloud.
    """
    if hasattr(cloud, "features"):
        feats = cloud.features()
    else:
        feats = np.asarray(cloud, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != config.input_dim:
        raise DataError(
            f"forward: expected (N, {config.input_dim}) features, got {feats.shape}"
        )
    n = feats.shape[0]
    if n <= config.k:
        raise DataError(f"forward: cloud of {n} points needs > k={config.k}")
    missing = [nm for nm in _required_names(config) if nm not in params]
    if missing:
        raise DataError(f"forward: params missing {missing}")

    if edges is None:
        edges = knn_graph(feats[:, :3], config.k)
    else:
        edges = np.asarray(edges, dtype=np.int64)
        if edges.shape != (n, config.k):
            raise DataError(
                f"forward: precomputed edges {edges.shape} do not match "
                f"({n}, {config.k})"
            )
    f = ad.Node(feats)
    per_layer = []
    for i in range(len(config.edgeconv_channels)):
        f = edgeconv(
            f,
            edges,
            params[f"edge{i}_w"],
            params[f"edge{i}_gamma"],
            params[f"edge{i}_beta"],
            config.leaky_slope,
        )
        per_layer.append(f)

    cat = per_layer[0] if len(per_layer) == 1 else ad.concat(per_layer, axis=1)
    pooled = ad.max_reduce(cat, axis=0)  # (sum of channels,)
    x = ad.reshape(pooled, (1, pooled.value.shape[0]))
    for j in range(len(config.mlp_hidden)):
        x = ad.add(ad.matmul(x, params[f"head{j}_w"]), params[f"head{j}_b"])
        x = ad.leaky_relu(x, config.leaky_slope)
        x = ad.dropout(
            x, config.dropout_p, derive_seed(epoch_seed, "dropout", j), train
        )
    out = ad.add(ad.matmul(x, params["out_w"]), params["out_b"])  # (1, 2)
    raw_mu, log_var = ad.pick(out, 0), ad.pick(out, 1)
    mu = ad.add(ad.softplus(raw_mu), MU_FLOOR)
    return PredictionWithUncertainty(mu=mu, log_var=log_var)


def init_params(config: RegressorConfig, seed: int) -> ad.ParamSet:
    """Kaiming-uniform (fan-in) linear weights, zero biases, unit/zero norm
    affine; every tensor gets its own derived seed."""

    def kaiming(fan_in: int, shape: tuple, name: str) -> np.ndarray:
        rng = np.random.default_rng(derive_seed(seed, "init", name))
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    arrays = {}
    c_in = config.input_dim
    for i, c_out in enumerate(config.edgeconv_channels):
        arrays[f"edge{i}_w"] = kaiming(2 * c_in, (2 * c_in, c_out), f"edge{i}_w")
        arrays[f"edge{i}_gamma"] = np.ones(c_out)
        arrays[f"edge{i}_beta"] = np.zeros(c_out)
        c_in = c_out
    d_in = sum(config.edgeconv_channels)
    for j, h in enumerate(config.mlp_hidden):
        arrays[f"head{j}_w"] = kaiming(d_in, (d_in, h), f"head{j}_w")
        arrays[f"head{j}_b"] = np.zeros(h)
        d_in = h
    arrays["out_w"] = kaiming(d_in, (d_in, 2), "out_w")
    arrays["out_b"] = np.zeros(2)
    return ad.ParamSet(arrays)
