"""Tour the hybrid loss: six weight presets and a worked example.

The total blends a probabilistic part (Gaussian NLL in linear and log
domains, mixed by alpha) with a deterministic part (MAE / log-MAE /
relative error, mixed by delta and beta), weighted gamma : 0.5 - gamma.
A perfect prediction under preset 2 lands at about -1.1052 — negative
because log-MAE of a zero-error prediction bottoms out at ln(1e-8).
"""
from types import SimpleNamespace

from shapemetrics.losses import PRESETS, preset, total_loss

print(f"{'preset':8s} {'alpha':>6s} {'beta':>6s} {'delta':>6s} {'gamma':>6s}")
for name in sorted(PRESETS):
    w = preset(name)
    print(f"{name:8s} {w.alpha:6.2f} {w.beta:6.2f} {w.delta:6.2f} {w.gamma:6.2f}")

y = 0.35
pred = SimpleNamespace(mu=0.30, log_var=-2.0)
print(f"\nimperfect prediction (y={y}, mu={pred.mu}, log_var={pred.log_var}):")
for name in ("loss2", "loss5"):
    bd = total_loss(y, pred, preset(name))
    print(f"  {name}: total={bd.total:+.4f}  prob={bd.probabilistic:+.4f} "
          f"det={bd.deterministic:+.4f}")

bd = total_loss(1.0, SimpleNamespace(mu=1.0, log_var=0.0), preset("loss2"))
print(f"\nperfect prediction under loss2: total = {bd.total:.10f}")
