"""Fuse multi-view point maps into a decoder-ready feature cloud.

Shows the three pipeline stages — merged, selected (confidence filter),
subsampled — and how epoch resampling draws a fresh subset from the
selected pool each epoch while the deterministic path always returns
the same points.
"""
import numpy as np

from shapemetrics.cloud import epoch_resample, merge_pointmaps, select_top_confidence, subsample
from shapemetrics.synth import ShapeParams, gen_shape
from shapemetrics.viewsim import render_pointmap, sample_ring_poses

mesh = gen_shape(ShapeParams(family="displaced_icosphere", subdivision=3), seed=12)
poses = sample_ring_poses(8, seed=12, width=96, height=72)
maps = [render_pointmap(mesh, p, noise_sigma=0.001, seed=40 + i)
        for i, p in enumerate(poses)]

merged = merge_pointmaps(maps, shape_id="demo")
print(f"merged:     {merged.n_points} points from {len(maps)} views "
      f"(stage={merged.stage!r})")
print(f"            per-view counts: {np.bincount(merged.provenance).tolist()}")

selected = select_top_confidence(merged, fraction=0.5)
print(f"selected:   {selected.n_points} points, confidence >= "
      f"{selected.confidence.min():.3f} (stage={selected.stage!r})")

fixed = subsample(selected, 1024, seed=0)
print(f"subsampled: {fixed.n_points} points (stage={fixed.stage!r})")

# augment=True draws a different subset each epoch; off, it's frozen
a0 = epoch_resample(selected, 1024, epoch=0, base_seed=5, augment=True)
a1 = epoch_resample(selected, 1024, epoch=1, base_seed=5, augment=True)
f0 = epoch_resample(selected, 1024, epoch=0, base_seed=5, augment=False)
f1 = epoch_resample(selected, 1024, epoch=1, base_seed=5, augment=False)
print(f"augmented epochs share points:    {np.array_equal(a0.points, a1.points)}")
print(f"deterministic epochs share points: {np.array_equal(f0.points, f1.points)}")
