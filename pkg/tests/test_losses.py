"""Hybrid loss: presets, term formulas, recombination, and gradients."""
import math
from types import SimpleNamespace

import numpy as np
import pytest

from shapemetrics import autodiff as ad
from shapemetrics import losses
from shapemetrics.errors import ConfigError, DataError, NumericError


def pred(mu, log_var):
    return SimpleNamespace(mu=mu, log_var=log_var)


# ---------------------------------------------------------------------------
# presets / weights
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "name, expected",
    [
        ("loss1", (0.50, 0.35, 0.20, 0.10)),
        ("loss2", (0.50, 0.15, 0.00, 0.10)),
        ("loss3", (0.50, 0.15, 0.20, 0.10)),
        ("loss4", (0.50, 0.35, 0.00, 0.10)),
        ("loss5", (0.30, 0.35, 0.20, 0.10)),
        ("loss6", (0.30, 0.00, 0.00, 0.10)),
    ],
)
def test_preset_table_exact(name, expected):
    w = losses.preset(name)
    assert (w.alpha, w.beta, w.delta, w.gamma) == expected


def test_preset_name_forms():
    # CLI-facing: tolerate case and separator variations
    base = losses.preset("loss5")
    for variant in ("Loss5", "LOSS5", "loss 5", "loss_5"):
        assert losses.preset(variant) == base


def test_preset_unknown_rejected():
    with pytest.raises(ConfigError):
        losses.preset("loss7")
    with pytest.raises(ConfigError):
        losses.preset("")


@pytest.mark.parametrize(
    "alpha, beta, delta, gamma",
    [
        (-0.1, 0.1, 0.1, 0.1),
        (1.1, 0.1, 0.1, 0.1),
        (0.5, -0.05, 0.1, 0.1),
        (0.5, 0.1, -0.05, 0.1),
        (0.5, 0.7, 0.4, 0.1),  # delta + beta > 1
        (0.5, 0.1, 0.1, -0.01),
        (0.5, 0.1, 0.1, 0.51),
        (float("nan"), 0.1, 0.1, 0.1),
    ],
)
def test_weights_validation(alpha, beta, delta, gamma):
    with pytest.raises(ConfigError):
        losses.LossWeights(alpha=alpha, beta=beta, delta=delta, gamma=gamma)


def test_weights_boundary_values_accepted():
    losses.LossWeights(alpha=0.0, beta=0.0, delta=0.0, gamma=0.0)
    losses.LossWeights(alpha=1.0, beta=0.5, delta=0.5, gamma=0.5)


# ---------------------------------------------------------------------------
# individual terms
# ---------------------------------------------------------------------------


def test_nll_linear_examples():
    assert losses.nll_linear(1.0, 1.0, 0.0) == 0.0
    assert losses.nll_linear(2.0, 1.0, 0.0) == pytest.approx(0.5, abs=1e-15)
    assert losses.nll_linear(1.0, 1.0, 2.0) == pytest.approx(1.0, abs=1e-15)


def test_nll_linear_minimum_over_log_var():
    """For fixed residual r, the optimum is sigma^2 = r^2 with value
    (ln r^2 + 1) / 2."""
    y, mu = 1.0, 0.4
    r = y - mu
    lv_star = math.log(r * r)
    grid = np.linspace(lv_star - 4.0, lv_star + 4.0, 1601)
    vals = [losses.nll_linear(y, mu, float(lv)) for lv in grid]
    assert int(np.argmin(vals)) == 800  # center of the symmetric grid
    at_opt = losses.nll_linear(y, mu, lv_star)
    assert at_opt == pytest.approx(0.5 * (math.log(r * r) + 1.0), abs=1e-12)


def test_nll_linear_analytic_gradient():
    # d/dmu = -(y-mu) e^{-lv};  d/dlv = 1/2 - (y-mu)^2 e^{-lv} / 2
    y, mu0, lv0 = 2.0, 1.0, 0.0
    mu = ad.Node(mu0)
    lv = ad.Node(lv0)
    ad.backward(losses.nll_linear(y, mu, lv))
    assert float(mu.grad) == pytest.approx(-1.0, abs=1e-12)
    assert float(lv.grad) == pytest.approx(0.0, abs=1e-12)


def test_nll_log_examples():
    assert losses.nll_log(1.0, 1.0, 0.0) == 0.0
    # y = e, mu = 1, sigma^2 = 1: log-domain variance 1, residual 1
    assert losses.nll_log(math.e, 1.0, 0.0) == pytest.approx(0.5, abs=1e-12)


def test_nll_log_scale_invariance():
    # scaling (y, mu, sigma) by c leaves the log-domain NLL unchanged
    rng = np.random.default_rng(11)
    for _ in range(50):
        y = float(rng.uniform(0.05, 5.0))
        mu = y * float(rng.uniform(0.5, 2.0))
        lv = float(rng.uniform(-3.0, 3.0))
        base = losses.nll_log(y, mu, lv)
        for c in (1e-3, 7.0, 1e3):
            scaled = losses.nll_log(c * y, c * mu, lv + 2.0 * math.log(c))
            assert scaled == pytest.approx(base, abs=1e-9, rel=1e-9)


def test_det_terms_examples():
    mae, log_mae, rel = losses.det_terms(0.1, 0.12)
    assert mae == pytest.approx(0.02, abs=1e-15)
    assert rel == pytest.approx(0.2, abs=1e-12)

    mae, log_mae, rel = losses.det_terms(1.0, 1.0)
    assert mae == 0.0 and rel == 0.0
    assert log_mae == pytest.approx(math.log(1e-8), abs=1e-12)

    mae, log_mae, rel = losses.det_terms(1.0, 2.0)
    assert mae == 1.0 and rel == 1.0
    assert log_mae == pytest.approx(math.log(1.0 + 1e-8), abs=1e-15)


def test_det_terms_scaling():
    """rel_err survives joint (y, mu) scaling; mae does not."""
    y, mu = 0.8, 1.1
    mae0, _, rel0 = losses.det_terms(y, mu)
    for c in (0.01, 12.0):
        mae_c, _, rel_c = losses.det_terms(c * y, c * mu)
        assert rel_c == pytest.approx(rel0, rel=1e-12)
        assert mae_c == pytest.approx(c * mae0, rel=1e-12)
        assert abs(mae_c - mae0) > 1e-3  # genuinely scale-dependent


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------


def test_worked_loss2_perfect_prediction():
    """Perfect prediction under the loss2 preset: probabilistic part vanishes
    and only the clamped log-MAE survives."""
    bd = losses.total_loss(1.0, pred(1.0, 0.0), losses.preset("loss2"))
    assert bd.probabilistic == 0.0
    expected_det = 0.15 * math.log(1e-8)  # 0.85 * rel_err term is zero
    expected_total = (0.5 - 0.1) * expected_det
    assert bd.deterministic == pytest.approx(expected_det, abs=1e-9)
    assert bd.total == pytest.approx(expected_total, abs=1e-9)
    assert bd.total == pytest.approx(-1.1052, abs=5e-4)


def test_gamma_half_drops_deterministic():
    w = losses.LossWeights(alpha=0.5, beta=0.35, delta=0.20, gamma=0.5)
    bd = losses.total_loss(0.7, pred(1.0, -0.3), w)
    assert bd.total == 0.5 * bd.probabilistic
    assert bd.deterministic != 0.0  # nonzero but excluded


def test_loss6_deterministic_is_rel_err():
    bd = losses.total_loss(0.9, pred(0.5, 0.2), losses.preset("loss6"))
    assert bd.deterministic == bd.rel_err


def test_recombination_identities_random():
    """Breakdown fields recombine into the aggregates to 1e-12 on 1000
    random valid (weights, inputs) draws."""
    rng = np.random.default_rng(20240817)
    for _ in range(1000):
        a = float(rng.uniform(0.0, 1.0))
        b = float(rng.uniform(0.0, 1.0))
        d = float(rng.uniform(0.0, 1.0 - b))
        g = float(rng.uniform(0.0, 0.5))
        w = losses.LossWeights(alpha=a, beta=b, delta=d, gamma=g)
        y = float(np.exp(rng.uniform(np.log(1e-3), np.log(10.0))))
        mu = y * float(np.exp(rng.normal(0.0, 0.5)))
        lv = float(rng.uniform(-4.0, 3.0))
        bd = losses.total_loss(y, pred(mu, lv), w)

        prob_ref = a * bd.nll_linear + (1.0 - a) * bd.nll_log
        det_ref = d * bd.mae + b * bd.log_mae + (1.0 - d - b) * bd.rel_err
        total_ref = g * bd.probabilistic + (0.5 - g) * bd.deterministic
        for got, ref in (
            (bd.probabilistic, prob_ref),
            (bd.deterministic, det_ref),
            (bd.total, total_ref),
        ):
            assert abs(got - ref) <= 1e-12 * max(1.0, abs(ref))


def test_total_loss_accepts_weight_tuple():
    bd = losses.total_loss(1.0, pred(1.2, 0.1), (0.3, 0.35, 0.2, 0.1))
    ref = losses.total_loss(1.0, pred(1.2, 0.1), losses.preset("loss5"))
    assert bd.total == ref.total


# ---------------------------------------------------------------------------
# autodiff path
# ---------------------------------------------------------------------------


def test_node_path_matches_float_path():
    y = 0.73
    mu0, lv0 = 1.18, -0.6
    w = losses.preset("loss1")
    bd_f = losses.total_loss(y, pred(mu0, lv0), w)
    bd_n = losses.total_loss(y, pred(ad.Node(mu0), ad.Node(lv0)), w)
    for field in (
        "nll_linear", "nll_log", "mae", "log_mae", "rel_err",
        "probabilistic", "deterministic", "total",
    ):
        node_val = getattr(bd_n, field)
        assert isinstance(node_val, ad.Node)
        assert float(node_val.value) == pytest.approx(
            getattr(bd_f, field), rel=1e-12
        )


def test_total_loss_gradient_matches_fd():
    # away from the mae = 0 kink
    y = 0.7
    w = losses.preset("loss5")
    params = ad.ParamSet({"mu": 1.3, "log_var": -0.4})

    def f(p):
        return losses.total_loss(y, pred(p["mu"], p["log_var"]), w).total

    assert ad.grad_check(f, params, eps=1e-5) <= 1e-6


def test_backward_reaches_both_inputs():
    mu = ad.Node(0.9)
    lv = ad.Node(0.3)
    bd = losses.total_loss(0.5, pred(mu, lv), losses.preset("loss3"))
    ad.backward(bd.total)
    assert mu.grad is not None and np.isfinite(mu.grad)
    assert lv.grad is not None and np.isfinite(lv.grad)


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------


def test_nonpositive_targets_rejected():
    with pytest.raises(DataError):
        losses.nll_log(0.0, 1.0, 0.0)
    with pytest.raises(DataError):
        losses.nll_log(1.0, -0.5, 0.0)
    with pytest.raises(DataError):
        losses.det_terms(-1.0, 0.5)


def test_nonfinite_inputs_rejected():
    with pytest.raises(NumericError):
        losses.nll_linear(1.0, float("nan"), 0.0)
    with pytest.raises(NumericError):
        losses.nll_linear(1.0, 1.0, float("inf"))
    with pytest.raises(NumericError):
        losses.det_terms(float("inf"), 1.0)
