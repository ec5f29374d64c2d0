"""Hybrid regression loss: Gaussian NLL (linear + log domain) blended with
deterministic error terms.

The probabilistic half treats the target as Gaussian with predicted mean mu
and variance exp(log_var); it is evaluated both on raw values and on
log-transformed values so targets spanning orders of magnitude still train.
The deterministic half mixes MAE, log-MAE, and relative error.

Every term accepts ``mu`` / ``log_var`` either as plain floats or as
autodiff Nodes; the same code path produces a differentiable loss graph when
fed Nodes.  Targets ``y`` and all weights are always plain floats.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import autodiff as ad
from .errors import ConfigError, DataError, NonFiniteError

# log-MAE clamp; ln(mae + eps) stays finite at a perfect prediction
LOG_MAE_EPS = 1e-8

PRESETS = {
    # name: (alpha, beta, delta, gamma)
    "loss1": (0.50, 0.35, 0.20, 0.10),
    "loss2": (0.50, 0.15, 0.00, 0.10),
    "loss3": (0.50, 0.15, 0.20, 0.10),
    "loss4": (0.50, 0.35, 0.00, 0.10),
    "loss5": (0.30, 0.35, 0.20, 0.10),
    "loss6": (0.30, 0.00, 0.00, 0.10),
}


def _is_node(x) -> bool:
    return isinstance(x, ad.Node)


# Dispatch helpers: route through the autodiff graph when either operand is
# a Node, plain float math otherwise.

def _add(a, b):
    if _is_node(a) or _is_node(b):
        return ad.add(a, b)
    return a + b


def _sub(a, b):
    if _is_node(a) or _is_node(b):
        return ad.sub(a, b)
    return a - b


def _mul(a, b):
    if _is_node(a) or _is_node(b):
        return ad.mul(a, b)
    return a * b


def _log(a):
    return ad.log(a) if _is_node(a) else math.log(a)


def _exp(a):
    return ad.exp(a) if _is_node(a) else math.exp(a)


def _abs(a):
    return ad.absolute(a) if _is_node(a) else abs(a)


def _neg(a):
    return ad.neg(a) if _is_node(a) else -a


def _float_of(a) -> float:
    return float(a.value) if _is_node(a) else float(a)


def _require_finite(name: str, *values) -> None:
    for v in values:
        if not math.isfinite(_float_of(v)):
            raise NonFiniteError(f"{name}: non-finite input {_float_of(v)!r}")


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights (alpha, beta, delta, gamma) for the hybrid loss.

    alpha blends the two NLL domains, delta/beta/(1-delta-beta) blend the
    deterministic terms, and gamma splits probabilistic vs deterministic in
    the total (coefficients gamma and 0.5-gamma).
    """

    alpha: float
    beta: float
    delta: float
    gamma: float

    def __post_init__(self):
        for name in ("alpha", "beta", "delta", "gamma"):
            v = getattr(self, name)
            if not math.isfinite(float(v)):
                raise ConfigError(f"LossWeights.{name} must be finite, got {v!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0.0 or self.delta < 0.0:
            raise ConfigError(
                f"beta and delta must be >= 0, got beta={self.beta} delta={self.delta}"
            )
        if self.delta + self.beta > 1.0:
            raise ConfigError(
                f"delta + beta must be <= 1, got {self.delta} + {self.beta}"
            )
        if not 0.0 <= self.gamma <= 0.5:
            raise ConfigError(f"gamma must lie in [0, 0.5], got {self.gamma}")


def preset(name: str) -> LossWeights:
    """Named weight configuration ("loss1" .. "loss6", case-insensitive)."""
    key = str(name).strip().lower().replace(" ", "").replace("_", "")
    if key not in PRESETS:
        raise ConfigError(
            f"unknown loss preset {name!r}; expected one of {sorted(PRESETS)}"
        )
    alpha, beta, delta, gamma = PRESETS[key]
    return LossWeights(alpha=alpha, beta=beta, delta=delta, gamma=gamma)


@dataclass(frozen=True)
class LossBreakdown:
    """Every term of the hybrid loss plus the blended aggregates.

    Fields are floats when the loss was evaluated on floats, autodiff Nodes
    when evaluated on Nodes (call backward on ``total``).
    """

    nll_linear: object
    nll_log: object
    mae: object
    log_mae: object
    rel_err: object
    probabilistic: object
    deterministic: object
    total: object


def nll_linear(y: float, mu, log_var):
    """Gaussian negative log-likelihood in the linear domain.

    0.5 * (log_var + (y - mu)^2 / sigma^2) with sigma^2 = exp(log_var);
    written division-free as (y - mu)^2 * exp(-log_var).
    """
    _require_finite("nll_linear", y, mu, log_var)
    diff = _sub(float(y), mu)
    sq = _mul(diff, diff)
    return _mul(0.5, _add(log_var, _mul(sq, _exp(_neg(log_var)))))


def nll_log(y: float, mu, log_var):
    """Gaussian NLL on log-transformed targets.

    The single predicted variance is transported to the log domain by the
    first-order (delta-method) mapping sigma_log^2 = sigma^2 / mu^2, i.e.
    log-domain log-variance L = log_var - 2*ln(mu).  Then the linear-domain
    formula applies with residual ln(y) - ln(mu).
    """
    _require_finite("nll_log", y, mu, log_var)
    if float(y) <= 0.0:
        raise DataError(f"nll_log requires y > 0, got {y}")
    if _float_of(mu) <= 0.0:
        raise DataError(f"nll_log requires mu > 0, got {_float_of(mu)}")
    residual = _sub(math.log(y), _log(mu))
    log_var_log = _sub(log_var, _mul(2.0, _log(mu)))
    sq = _mul(residual, residual)
    return _mul(0.5, _add(log_var_log, _mul(sq, _exp(_neg(log_var_log)))))


def det_terms(y: float, mu):
    """Deterministic error terms: (mae, log_mae, rel_err).

    mae = |y - mu| (per-sample; batches, if any, average outside),
    log_mae = ln(mae + 1e-8), rel_err = |y - mu| / y.
    """
    _require_finite("det_terms", y, mu)
    if float(y) <= 0.0:
        raise DataError(f"det_terms requires y > 0, got {y}")
    mae = _abs(_sub(float(y), mu))
    log_mae = _log(_add(mae, LOG_MAE_EPS))
    rel_err = _mul(mae, 1.0 / float(y))
    return mae, log_mae, rel_err


def total_loss(y: float, prediction, weights: LossWeights) -> LossBreakdown:
    """Full hybrid loss for one sample.

    ``prediction`` is anything with ``mu`` and ``log_var`` attributes
    (floats or autodiff Nodes).  Returns the complete term breakdown;
    ``total`` = gamma * probabilistic + (0.5 - gamma) * deterministic.
    """
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    mu = prediction.mu
    log_var = prediction.log_var
    t_nll_lin = nll_linear(y, mu, log_var)
    t_nll_log = nll_log(y, mu, log_var)
    mae, log_mae, rel_err = det_terms(y, mu)

    a, b, d, g = weights.alpha, weights.beta, weights.delta, weights.gamma
    prob = _add(_mul(a, t_nll_lin), _mul(1.0 - a, t_nll_log))
    det = _add(
        _add(_mul(d, mae), _mul(b, log_mae)),
        _mul(1.0 - d - b, rel_err),
    )
    total = _add(_mul(g, prob), _mul(0.5 - g, det))
    return LossBreakdown(
        nll_linear=t_nll_lin,
        nll_log=t_nll_log,
        mae=mae,
        log_mae=log_mae,
        rel_err=rel_err,
        probabilistic=prob,
        deterministic=det,
        total=total,
    )
