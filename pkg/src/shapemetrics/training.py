"""Deterministic training loop for the twin metric regressors.

AdamW-style updates (decoupled weight decay), cosine-annealed learning rate
with warm restarts, per-head early stopping on validation loss, best-epoch
checkpointing, and CSV/JSON run logging.  Everything is a pure function of
(manifest, clouds, config): two runs with the same seed produce identical
loss trajectories.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from . import cloud as cloud_mod
from . import losses
from .errors import ConfigError, DataError, NonFiniteError, NumericError
from .regressor import RegressorConfig, forward, init_params, knn_graph
from .seeding import derive_seed

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MAX_STRIKES = 10  # non-finite steps tolerated before aborting the run

HEADS = ("volume", "surface")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults follow the reference schedule
    (lr 1.6e-4, wd 1e-4, T_max 60, eta_min 2e-6, 650 epochs, patience 35,
    batch size 1)."""

    lr: float = 1.6e-4
    weight_decay: float = 1.0e-4
    t_max: int = 60
    eta_min: float = 2.0e-6
    max_epochs: int = 650
    patience: int = 35
    batch_size: int = 1
    subsample_n: int = 2048
    augment: bool = False
    loss: str = "loss5"
    target: str = "both"
    seed: int = 0
    clip_norm: float = None  # global grad-norm ceiling; None = off
    net: RegressorConfig = field(default_factory=RegressorConfig)

    def __post_init__(self):
        if self.lr <= 0 or self.eta_min <= 0:
            raise ConfigError(f"lr/eta_min must be > 0, got {self.lr}/{self.eta_min}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.eta_min > self.lr:
            raise ConfigError(f"eta_min {self.eta_min} exceeds lr {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.t_max < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("t_max, max_epochs, batch_size must be >= 1")
        # patience < max_epochs, except the degenerate single-epoch run
        # where patience can never fire anyway
        if self.patience < 1 or (self.max_epochs > 1 and self.patience >= self.max_epochs):
            raise ConfigError(
                f"patience must lie in [1, max_epochs), got {self.patience}"
            )
        if self.subsample_n < 1:
            raise ConfigError(f"subsample_n must be >= 1, got {self.subsample_n}")
        if self.target not in ("volume", "surface", "both"):
            raise ConfigError(f"target must be volume|surface|both, got {self.target!r}")
        self.weights()  # validate the loss preset/weights eagerly

    def weights(self) -> losses.LossWeights:
        if isinstance(self.loss, losses.LossWeights):
            return self.loss
        return losses.preset(self.loss)

    def heads(self) -> tuple:
        return HEADS if self.target == "both" else (self.target,)

    def to_dict(self) -> dict:
        w = self.weights()
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "t_max": self.t_max,
            "eta_min": self.eta_min,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "batch_size": self.batch_size,
            "subsample_n": self.subsample_n,
            "augment": self.augment,
            "loss": self.loss if isinstance(self.loss, str) else "custom",
            "loss_weights": [w.alpha, w.beta, w.delta, w.gamma],
            "target": self.target,
            "seed": self.seed,
            "clip_norm": self.clip_norm,
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        loss = d["loss"]
        if loss == "custom":
            loss = losses.LossWeights(*d["loss_weights"])
        return cls(
            lr=d["lr"],
            weight_decay=d["weight_decay"],
            t_max=d["t_max"],
            eta_min=d["eta_min"],
            max_epochs=d["max_epochs"],
            patience=d["patience"],
            batch_size=d["batch_size"],
            subsample_n=d["subsample_n"],
            augment=d["augment"],
            loss=loss,
            target=d["target"],
            seed=d["seed"],
            clip_norm=d.get("clip_norm"),
            net=RegressorConfig.from_dict(d["net"]),
        )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moments per parameter plus a shared step counter."""

    def __init__(self, params: ad.ParamSet):
        self.m = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.step = 0


def optimizer_step(
    params: ad.ParamSet,
    grads: dict,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One AdamW update in place: decoupled decay theta *= (1 - lr*wd),
    then the bias-corrected adaptive step."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, node in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != node.value.shape:
            raise DataError(
                f"gradient shape {g.shape} != param '{name}' {node.value.shape}"
            )
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            node.value *= 1.0 - lr * weight_decay
        node.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Cosine annealing with warm restarts every t_max epochs."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    phase = (epoch % config.t_max) / config.t_max
    return config.eta_min + 0.5 * (config.lr - config.eta_min) * (
        1.0 + math.cos(math.pi * phase)
    )


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------


@dataclass
class TrainRun:
    config: dict
    records: list  # one dict per epoch
    heads: dict  # head -> {best_epoch, best_val_loss, checkpoint, stopped_epoch}
    strikes: int
    wall_time_s: float
    early_exit: bool = False


def save_run(run: TrainRun, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "config": run.config,
        "heads": run.heads,
        "strikes": run.strikes,
        "wall_time_s": run.wall_time_s,
        "early_exit": run.early_exit,
        "n_epochs": len(run.records),
    }
    (out / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if run.records:
        cols = list(run.records[0].keys())
        with open(out / "epochs.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            writer.writerows(run.records)


def load_run(out_dir) -> TrainRun:
    out = Path(out_dir)
    summary = json.loads((out / "run.json").read_text())
    records = []
    csv_path = out / "epochs.csv"
    if csv_path.exists():
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                records.append(
                    {
                        k: (v if k == "resample_digest" else float(v))
                        for k, v in row.items()
                    }
                )
    return TrainRun(
        config=summary["config"],
        records=records,
        heads=summary["heads"],
        strikes=summary["strikes"],
        wall_time_s=summary["wall_time_s"],
        early_exit=summary.get("early_exit", False),
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _gt(entry, head: str) -> float:
    return entry.volume if head == "volume" else entry.surface_area


def _float_pred(pred) -> SimpleNamespace:
    return SimpleNamespace(mu=pred.mu_value, log_var=pred.log_var_value)


class EarlyStopper:
    """Strict-improvement early stopping: stop once `patience` consecutive
    epochs pass without a new best validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience


class _HeadState:
    def __init__(self, config: TrainConfig, head: str):
        self.head = head
        self.params = init_params(config.net, derive_seed(config.seed, "init", head))
        self.opt = AdamState(self.params)
        self.stopper = EarlyStopper(config.patience)
        self.stopped_epoch = None
        self.checkpoint = None
        self.last_val = None  # frozen metrics once stopped

    @property
    def active(self) -> bool:
        return self.stopped_epoch is None


def _subsample_digest(sub: cloud_mod.FeatureCloud) -> str:
    h = hashlib.sha256()
    h.update(sub.points.tobytes())
    h.update(sub.confidence.tobytes())
    return h.hexdigest()[:12]


def _val_metrics(preds: list, ys: list, weights) -> dict:
    """Mean val loss plus MAE / MAPE(mean, median) / RMSE over val shapes."""
    losses_ = [
        float(losses.total_loss(y, p, weights).total) for p, y in zip(preds, ys)
    ]
    err = np.array([p.mu - y for p, y in zip(preds, ys)])
    ape = np.array([100.0 * abs(p.mu - y) / y for p, y in zip(preds, ys)])
    return {
        "val_loss": float(np.mean(losses_)),
        "val_mae": float(np.mean(np.abs(err))),
        "val_mape": float(np.mean(ape)),
        "val_mape_median": float(np.median(ape)),
        "val_rmse": float(np.sqrt(np.mean(err * err))),
    }


def train(
    manifest,
    clouds: dict,
    config: TrainConfig,
    out_dir,
    stop_fn=None,
) -> TrainRun:
    """Full training run; returns the TrainRun and persists it to out_dir.

    clouds maps shape_id -> FeatureCloud at the merged or selected stage;
    the loop draws the per-epoch subsample itself (fixed seed per shape for
    validation; epoch-dependent for training only when config.augment).
    Both heads consume the same subsample.  stop_fn, if given, sees each
    epoch record and may end the run early by returning True.
    """
    t_start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights = config.weights()

    train_entries = sorted(manifest.split("train"), key=lambda e: e.shape_id)
    val_entries = sorted(manifest.split("val"), key=lambda e: e.shape_id)
    if not train_entries or not val_entries:
        raise DataError(
            f"need non-empty train and val splits, got {len(train_entries)}/"
            f"{len(val_entries)}"
        )
    for e in train_entries + val_entries:
        if e.shape_id not in clouds:
            raise DataError(f"no cloud for shape '{e.shape_id}'")

    heads = {h: _HeadState(config, h) for h in config.heads()}
    val_seed = derive_seed(config.seed, "val")

    # fixed validation subsamples + graphs, reused across every epoch
    val_data = []
    for e in val_entries:
        sub = cloud_mod.epoch_resample(
            clouds[e.shape_id], config.subsample_n, 0, val_seed, augment=False
        )
        feats = sub.features()
        val_data.append((e, feats, knn_graph(feats[:, :3], config.net.k)))

    train_cache = {}  # shape_id -> (feats, edges); only when not augmenting

    def train_sample(entry, epoch):
        if not config.augment and entry.shape_id in train_cache:
            return train_cache[entry.shape_id]
        sub = cloud_mod.epoch_resample(
            clouds[entry.shape_id],
            config.subsample_n,
            epoch,
            config.seed,
            augment=config.augment,
        )
        feats = sub.features()
        item = (feats, knn_graph(feats[:, :3], config.net.k), sub)
        if not config.augment:
            train_cache[entry.shape_id] = item
        return item

    records = []
    strikes = 0
    early_exit = False

    for epoch in range(config.max_epochs):
        t_epoch = time.perf_counter()
        lr = cosine_lr(epoch, config)
        order = np.random.default_rng(
            derive_seed(config.seed, "shuffle", epoch)
        ).permutation(len(train_entries))

        epoch_losses = {h: [] for h in heads}
        # fingerprint of a fixed shape's subsample: stable when augment is
        # off, changes per epoch when on
        digest = _subsample_digest(train_sample(train_entries[0], epoch)[2])
        batch = {h: [] for h in heads}  # accumulated loss nodes

        def flush(head_state, nodes):
            # mean over the batch (ad.add is binary; fold the list)
            total = nodes[0]
            for nd in nodes[1:]:
                total = ad.add(total, nd)
            if len(nodes) > 1:
                total = ad.mul(1.0 / len(nodes), total)
            head_state.params.zero_grad()
            ad.backward(total)
            grads = head_state.params.grads()
            if config.clip_norm is not None:
                # the log-MAE term emits O(1/mae) gradients on near-perfect
                # samples; an unclipped spike poisons the second-moment
                # state for hundreds of steps
                norm = math.sqrt(
                    sum(float(np.sum(g * g)) for g in grads.values())
                )
                if norm > config.clip_norm:
                    grads = {
                        k: g * (config.clip_norm / norm) for k, g in grads.items()
                    }
            optimizer_step(
                head_state.params,
                grads,
                head_state.opt,
                lr,
                config.weight_decay,
            )

        for idx in order:
            entry = train_entries[idx]
            feats, edges, sub = train_sample(entry, epoch)
            for h, hs in heads.items():
                if not hs.active:
                    continue
                try:
                    pred = forward(
                        feats,
                        config.net,
                        hs.params,
                        train=True,
                        epoch_seed=derive_seed(
                            config.seed, "dropout", entry.shape_id, epoch, h
                        ),
                        edges=edges,
                    )
                    bd = losses.total_loss(_gt(entry, h), pred, weights)
                    epoch_losses[h].append(float(bd.total.value))
                    batch[h].append(bd.total)
                    if len(batch[h]) >= config.batch_size:
                        flush(hs, batch[h])
                        batch[h] = []
                except NonFiniteError:
                    strikes += 1
                    batch[h] = []
                    if strikes >= MAX_STRIKES:
                        raise NumericError(
                            f"aborting: {strikes} non-finite training steps "
                            f"(last at epoch {epoch}, shape {entry.shape_id}, "
                            f"head {h})"
                        )
        for h, hs in heads.items():  # trailing partial batch
            if hs.active and batch[h]:
                try:
                    flush(hs, batch[h])
                except NonFiniteError:
                    strikes += 1
                    if strikes >= MAX_STRIKES:
                        raise NumericError(
                            f"aborting: {strikes} non-finite training steps"
                        )
                batch[h] = []

        # validation: dropout off, fixed subsamples
        record = {
            "epoch": epoch,
            "lr": lr,
            "resample_digest": digest,
        }
        for h, hs in heads.items():
            if hs.active:
                preds, ys = [], []
                for e, feats, edges in val_data:
                    p = forward(feats, config.net, hs.params, train=False, edges=edges)
                    preds.append(_float_pred(p))
                    ys.append(_gt(e, h))
                metrics = _val_metrics(preds, ys, weights)
                hs.last_val = metrics
            else:
                metrics = hs.last_val  # params frozen, metrics unchanged
            record[f"{h}_train_loss"] = (
                float(np.mean(epoch_losses[h])) if epoch_losses[h] else math.nan
            )
            for k, v in metrics.items():
                record[f"{h}_{k}"] = v

            if hs.active:
                should_stop = hs.stopper.update(epoch, metrics["val_loss"])
                if hs.stopper.best_epoch == epoch:
                    hs.checkpoint = str(out / f"{h}_best.ckpt")
                    ad.save_params(
                        hs.params,
                        hs.checkpoint,
                        meta={
                            "head": h,
                            "epoch": epoch,
                            "val_loss": metrics["val_loss"],
                            "regressor_config": config.net.to_dict(),
                            "train_config": config.to_dict(),
                        },
                    )
                if should_stop:
                    hs.stopped_epoch = epoch

        record["seconds"] = time.perf_counter() - t_epoch
        records.append(record)

        if stop_fn is not None and stop_fn(record):
            early_exit = True
            break
        if all(not hs.active for hs in heads.values()):
            break

    run = TrainRun(
        config=config.to_dict(),
        records=records,
        heads={
            h: {
                "best_epoch": hs.stopper.best_epoch,
                "best_val_loss": hs.stopper.best,
                "checkpoint": hs.checkpoint,
                "stopped_epoch": hs.stopped_epoch,
            }
            for h, hs in heads.items()
        },
        strikes=strikes,
        wall_time_s=time.perf_counter() - t_start,
        early_exit=early_exit,
    )
    save_run(run, out)
    return run


def predict_split(
    checkpoint_path, manifest, clouds: dict, config: TrainConfig, split: str = "val"
):
    """Per-shape predictions of a saved checkpoint on one manifest split.

    Returns (head, rows) where rows are (shape_id, gt, mu, log_var) tuples in
    shape-id order, using the same fixed subsamples as evaluate_checkpoint.
    The head comes from checkpoint metadata, so callers pass the path only.
    """
    params, meta = ad.load_params(checkpoint_path)
    net = RegressorConfig.from_dict(meta["regressor_config"])
    head = meta["head"]
    val_seed = derive_seed(config.seed, "val")
    rows = []
    for e in sorted(manifest.split(split), key=lambda e: e.shape_id):
        sub = cloud_mod.epoch_resample(
            clouds[e.shape_id], config.subsample_n, 0, val_seed, augment=False
        )
        p = _float_pred(forward(sub, net, params, train=False))
        rows.append((e.shape_id, _gt(e, head), p.mu, p.log_var))
    return head, rows


def evaluate_checkpoint(
    checkpoint_path, manifest, clouds: dict, config: TrainConfig, head: str
) -> dict:
    """Validation metrics of a saved checkpoint, using the same fixed val
    subsamples as train(); reload must reproduce the recorded numbers."""
    params, meta = ad.load_params(checkpoint_path)
    net = RegressorConfig.from_dict(meta["regressor_config"])
    weights = config.weights()
    val_seed = derive_seed(config.seed, "val")
    preds, ys = [], []
    for e in sorted(manifest.split("val"), key=lambda e: e.shape_id):
        sub = cloud_mod.epoch_resample(
            clouds[e.shape_id], config.subsample_n, 0, val_seed, augment=False
        )
        p = forward(sub, net, params, train=False)
        preds.append(_float_pred(p))
        ys.append(_gt(e, head))
    return _val_metrics(preds, ys, weights)
