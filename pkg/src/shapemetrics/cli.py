"""Single `shapemetrics` command orchestrating the full pipeline.

Subcommands: `synth gen`, `synth filter`, `geom stats`, `render`,
`cloud build`, `train`, `eval`, `ablate`.

Config files use a plain-text key=value grammar:

  * blank lines and full-line ``#`` comments are ignored
  * one ``key = value`` pair per line; duplicate keys are an error
  * values: ``true``/``false`` (also on/off), integers, floats,
    comma-separated lists, double-quoted or bare strings

Every key has a same-named flag (``subsample_n`` -> ``--subsample-n``);
flags override the file.  Unknown config keys are rejected.  Commands
that produce a directory write ``resolved_config.json`` (resolved
config + seed + version) into it for reproducibility.  When ``--out``
is omitted, the SHAPEMETRICS_OUT environment variable supplies the
output root.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__, evaluation, losses
from .cloud import (
    build_cloud,
    load_fcld,
    merge_pointmaps,
    save_fcld,
    select_top_confidence,
)
from .errors import ConfigError, DataError, NumericError
from .geometry import (
    load_obj,
    mc_volume_oracle,
    measure,
    normalize_to_unit_bbox,
    validate_watertight,
)
from .regressor import RegressorConfig
from .seeding import derive_seed
from .synth import (
    FAMILIES,
    DatasetManifest,
    GenConfig,
    filter_worst,
    gen_dataset,
    load_manifest,
    save_manifest,
)
from .training import TrainConfig, predict_split, train
from .viewsim import (
    load_pmap,
    render_pointmap,
    sample_ring_poses,
    sample_sector_poses,
    save_pmap,
)

OUT_ROOT_ENV = "SHAPEMETRICS_OUT"

# ---------------------------------------------------------------------------
# key=value config files


def _parse_scalar(tok: str):
    t = tok.strip()
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    if len(t) >= 2 and t[0] == '"' and t[-1] == '"':
        return t[1:-1]
    return t


def parse_config_text(text: str) -> dict:
    """key = value lines -> {key: scalar-or-tuple}; duplicates rejected."""
    out = {}
    for ln_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {ln_no}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not key:
            raise ConfigError(f"config line {ln_no}: empty key")
        if key in out:
            raise ConfigError(f"config line {ln_no}: duplicate key '{key}'")
        if "," in val:
            out[key] = tuple(_parse_scalar(v) for v in val.split(","))
        else:
            out[key] = _parse_scalar(val)
    return out


def _as_bool(v, key: str) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, str):
        low = v.lower()
        if low in ("true", "on", "yes", "1"):
            return True
        if low in ("false", "off", "no", "0"):
            return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _as_int(v, key: str) -> int:
    if isinstance(v, bool):
        raise ConfigError(f"{key}: expected an integer, got {v!r}")
    if isinstance(v, int):
        return v
    if isinstance(v, str):
        try:
            return int(v)
        except ValueError:
            pass
    raise ConfigError(f"{key}: expected an integer, got {v!r}")


def _as_float(v, key: str) -> float:
    if isinstance(v, bool):
        raise ConfigError(f"{key}: expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            pass
    raise ConfigError(f"{key}: expected a number, got {v!r}")


def _as_str(v, key: str) -> str:
    if isinstance(v, str):
        return v
    raise ConfigError(f"{key}: expected a string, got {v!r}")


def _as_int_tuple(v, key: str) -> tuple:
    if isinstance(v, str):
        v = tuple(p for p in v.split(",") if p.strip() != "")
    if isinstance(v, (int,)) and not isinstance(v, bool):
        return (v,)
    if isinstance(v, (tuple, list)):
        return tuple(_as_int(item, key) for item in v)
    raise ConfigError(f"{key}: expected integers, got {v!r}")


def _as_str_tuple(v, key: str) -> tuple:
    if isinstance(v, str):
        v = tuple(p.strip() for p in v.split(",") if p.strip() != "")
    if isinstance(v, (tuple, list)):
        return tuple(_as_str(item, key) for item in v)
    raise ConfigError(f"{key}: expected strings, got {v!r}")


_TC = TrainConfig()
_RC = RegressorConfig()

TRAIN_KEYS = {
    "lr": _as_float,
    "weight_decay": _as_float,
    "t_max": _as_int,
    "eta_min": _as_float,
    "max_epochs": _as_int,
    "patience": _as_int,
    "batch_size": _as_int,
    "subsample_n": _as_int,
    "augment": _as_bool,
    "loss": _as_str,
    "target": _as_str,
    "seed": _as_int,
    "clip_norm": _as_float,
    "k": _as_int,
    "channels": _as_int_tuple,
    "mlp_hidden": _as_int_tuple,
    "dropout_p": _as_float,
    "leaky_slope": _as_float,
    "alpha": _as_float,
    "beta": _as_float,
    "delta": _as_float,
    "gamma": _as_float,
}
TRAIN_DEFAULTS = {
    "lr": _TC.lr,
    "weight_decay": _TC.weight_decay,
    "t_max": _TC.t_max,
    "eta_min": _TC.eta_min,
    "max_epochs": _TC.max_epochs,
    "patience": _TC.patience,
    "batch_size": _TC.batch_size,
    "subsample_n": _TC.subsample_n,
    "augment": _TC.augment,
    "loss": _TC.loss,
    "target": _TC.target,
    "seed": _TC.seed,
    "clip_norm": _TC.clip_norm,
    "k": _RC.k,
    "channels": _RC.edgeconv_channels,
    "mlp_hidden": _RC.mlp_hidden,
    "dropout_p": _RC.dropout_p,
    "leaky_slope": _RC.leaky_slope,
    "alpha": None,
    "beta": None,
    "delta": None,
    "gamma": None,
}

GEN_KEYS = {
    "train": _as_int,
    "val": _as_int,
    "families": _as_str_tuple,
    "subdivision": _as_int,
    "grid_res": _as_int,
    "seed": _as_int,
}
GEN_DEFAULTS = {
    "train": 8,
    "val": 2,
    "families": FAMILIES,
    "subdivision": 3,
    "grid_res": 48,
    "seed": 0,
}

RENDER_KEYS = {
    "views": _as_str,
    "width": _as_int,
    "height": _as_int,
    "noise_sigma": _as_float,
    "radius": _as_float,
    "jitter": _as_float,
    "seed": _as_int,
}
RENDER_DEFAULTS = {
    "views": "ring30",
    "width": 160,
    "height": 120,
    "noise_sigma": 0.0,
    "radius": 2.2,
    "jitter": 0.0,
    "seed": 0,
}

EVAL_KEYS = {
    "split": _as_str,
    "bins": _as_int,
    "volume_split_threshold": _as_float,
    "surface_split_threshold": _as_float,
}
EVAL_DEFAULTS = {
    "split": "val",
    "bins": 20,
    "volume_split_threshold": 0.02,
    "surface_split_threshold": 2.0,
}

ABLATE_KEYS = {**TRAIN_KEYS, **RENDER_KEYS, "resolution": _as_int, "selection": _as_str}
ABLATE_DEFAULTS = {
    **TRAIN_DEFAULTS,
    **RENDER_DEFAULTS,
    "resolution": 2048,
    "selection": "all",
}


def resolve_config(keys: dict, defaults: dict, config_path, flag_values: dict) -> dict:
    """defaults <- config file <- flags, with unknown-key rejection."""
    cfg = dict(defaults)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = parse_config_text(path.read_text())
        unknown = sorted(set(raw) - set(keys))
        if unknown:
            raise ConfigError(
                f"unknown config keys: {', '.join(unknown)}"
                f" (known: {', '.join(sorted(keys))})"
            )
        for k, v in raw.items():
            cfg[k] = keys[k](v, k)
    for k, v in flag_values.items():
        if v is not None:
            cfg[k] = keys[k](v, k)
    return cfg


def _add_key_flags(sp, keys: dict) -> None:
    # one flag per config key, same name with dashes; parsed by the caster
    for k in keys:
        sp.add_argument("--" + k.replace("_", "-"), dest=f"key_{k}", default=None)


def _flag_values(args, keys: dict) -> dict:
    return {k: getattr(args, f"key_{k}") for k in keys}


def _jsonable(v):
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _resolve_out(arg_value, default_leaf: str) -> Path:
    if arg_value:
        return Path(arg_value)
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return Path(root) / default_leaf
    raise ConfigError(f"--out is required (or set {OUT_ROOT_ENV})")


def write_resolved(out_dir: Path, command: str, cfg: dict, extra: dict = None) -> None:
    doc = {"command": command, "version": __version__, "config": _jsonable(cfg)}
    if extra:
        doc.update(_jsonable(extra))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# shared pieces

_RING_RE = re.compile(r"^ring(\d+)$")
_SECTOR_RE = re.compile(r"^sector(\d+)_(\d+)deg$")


def poses_for(views: str, seed: int, width: int, height: int, radius: float, jitter: float):
    """Named view layouts: ringN (full circle) or sectorN_DDdeg (window)."""
    m = _RING_RE.match(views)
    if m:
        return sample_ring_poses(
            int(m.group(1)), radius=radius, jitter=jitter, seed=seed,
            width=width, height=height,
        )
    m = _SECTOR_RE.match(views)
    if m:
        return sample_sector_poses(
            int(m.group(1)), sector_deg=float(m.group(2)), radius=radius,
            jitter=jitter, seed=seed, width=width, height=height,
        )
    raise ConfigError(f"unknown views layout '{views}' (want ringN or sectorN_DDdeg)")


def _mesh_path(manifest_path: Path, entry) -> Path:
    return Path(manifest_path).parent / entry.mesh_path


def _render_shape(mesh, shape_id: str, out_dir: Path, cfg: dict) -> int:
    """All views of one shape into out_dir/<shape_id>/view_###.pmap."""
    poses = poses_for(
        cfg["views"], derive_seed(cfg["seed"], "views", shape_id),
        cfg["width"], cfg["height"], cfg["radius"], cfg["jitter"],
    )
    shape_dir = out_dir / shape_id
    shape_dir.mkdir(parents=True, exist_ok=True)
    for j, pose in enumerate(poses):
        pm = render_pointmap(
            mesh, pose, noise_sigma=cfg["noise_sigma"],
            seed=derive_seed(cfg["seed"], "noise", shape_id, j),
        )
        save_pmap(pm, shape_dir / f"view_{j:03d}.pmap")
    return len(poses)


def _load_maps(shape_dir: Path) -> list:
    paths = sorted(Path(shape_dir).glob("*.pmap"))
    if not paths:
        raise DataError(f"no .pmap files in {shape_dir}")
    return [load_pmap(p) for p in paths]


def _train_config_from(cfg: dict, **overrides) -> TrainConfig:
    loss = cfg["loss"]
    four = [cfg.get(n) for n in ("alpha", "beta", "delta", "gamma")]
    if any(v is not None for v in four):
        if any(v is None for v in four):
            raise ConfigError("custom loss weights need all of alpha, beta, delta, gamma")
        loss = losses.LossWeights(*four)
    net = RegressorConfig(
        k=cfg["k"],
        edgeconv_channels=cfg["channels"],
        mlp_hidden=cfg["mlp_hidden"],
        dropout_p=cfg["dropout_p"],
        leaky_slope=cfg["leaky_slope"],
    )
    base = dict(
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        t_max=cfg["t_max"],
        eta_min=cfg["eta_min"],
        max_epochs=cfg["max_epochs"],
        patience=cfg["patience"],
        batch_size=cfg["batch_size"],
        subsample_n=cfg["subsample_n"],
        augment=cfg["augment"],
        loss=loss,
        target=cfg["target"],
        seed=cfg["seed"],
        clip_norm=cfg["clip_norm"],
        net=net,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _load_clouds(manifest, clouds_dir) -> dict:
    clouds_dir = Path(clouds_dir)
    out = {}
    for e in manifest.entries:
        path = clouds_dir / f"{e.shape_id}.fcld"
        if not path.is_file():
            raise DataError(f"missing cloud cache {path}")
        out[e.shape_id] = load_fcld(path, expected_shape_id=e.shape_id)
    return out


def _eval_head(run_dir: Path, head: str, manifest, clouds, config, split: str):
    ckpt = Path(run_dir) / f"{head}_best.ckpt"
    if not ckpt.is_file():
        raise DataError(f"missing checkpoint {ckpt}")
    got_head, rows = predict_split(ckpt, manifest, clouds, config, split=split)
    if got_head != head:
        raise DataError(f"checkpoint {ckpt} trained head '{got_head}', expected '{head}'")
    return [
        evaluation.EvalRecord.from_prediction(sid, gt, mu, lv)
        for sid, gt, mu, lv in rows
    ]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_gen(args) -> int:
    cfg = resolve_config(GEN_KEYS, GEN_DEFAULTS, args.config, _flag_values(args, GEN_KEYS))
    out = _resolve_out(args.out, "synth")
    gen_config = GenConfig(
        n_train=cfg["train"],
        n_val=cfg["val"],
        families=cfg["families"],
        subdivision=cfg["subdivision"],
        grid_res=cfg["grid_res"],
    )
    manifest = gen_dataset(gen_config, cfg["seed"], out)
    write_resolved(out, "synth gen", cfg)
    print(f"entries={len(manifest.entries)}")
    print(f"manifest={out / 'manifest.jsonl'}")
    return 0


def cmd_synth_filter(args) -> int:
    manifest = load_manifest(args.manifest)
    known = {e.shape_id for e in manifest.entries}
    with open(args.preds, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = tuple(reader.fieldnames or ())
        if {"id", "gt", "pred"} <= set(fields):
            id_col, pred_col = "id", "pred"
        elif {"shape_id", "gt", "pred_mu"} <= set(fields):
            id_col, pred_col = "shape_id", "pred_mu"  # eval records CSV
        else:
            raise DataError(
                f"{args.preds}: need columns id,gt,pred (or an eval records CSV)"
            )
        records = [(row[id_col], float(row["gt"]), float(row[pred_col])) for row in reader]
    stray = sorted({rid for rid, _, _ in records} - known)
    if stray:
        raise DataError(f"prediction ids not in manifest: {', '.join(stray[:5])}")
    outcome = filter_worst(records, args.fraction, args.criterion)
    doc = {
        "kept_ids": list(outcome.kept_ids),
        "rejected_ids": list(outcome.rejected_ids),
        "criterion": outcome.criterion,
        "fraction": outcome.fraction,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.out_manifest:
        kept = set(outcome.kept_ids)
        filtered = DatasetManifest(
            entries=[e for e in manifest.entries if e.shape_id in kept],
            global_seed=manifest.global_seed,
        )
        save_manifest(filtered, args.out_manifest)
    print(f"kept={len(outcome.kept_ids)}")
    print(f"rejected={len(outcome.rejected_ids)}")
    return 0


def cmd_geom_stats(args) -> int:
    mesh = load_obj(args.mesh)
    scale = None
    if args.normalize:
        mesh, scale = normalize_to_unit_bbox(mesh)
    report = validate_watertight(mesh)
    print(f"n_vertices={len(mesh.vertices)}")
    print(f"n_faces={len(mesh.faces)}")
    print(f"watertight={str(report.is_watertight).lower()}")
    if not report.is_watertight:
        raise DataError(
            f"{args.mesh}: not watertight (boundary={report.boundary_edge_count},"
            f" non_manifold={report.non_manifold_edge_count},"
            f" flipped={report.flipped_pair_count},"
            f" degenerate={report.degenerate_face_count})"
        )
    metrics = measure(mesh)
    if scale is not None:
        print(f"normalize_scale={scale!r}")
    print(f"volume={metrics.volume!r}")
    print(f"surface_area={metrics.surface_area!r}")
    print(f"bbox_min={','.join(repr(c) for c in metrics.bbox_min)}")
    print(f"bbox_max={','.join(repr(c) for c in metrics.bbox_max)}")
    if args.oracle:
        mc, stderr = mc_volume_oracle(mesh, args.oracle, seed=args.seed)
        print(f"mc_volume={mc!r}")
        print(f"mc_stderr={stderr!r}")
        print(f"volume_minus_mc={metrics.volume - mc!r}")
    return 0


def cmd_render(args) -> int:
    cfg = resolve_config(RENDER_KEYS, RENDER_DEFAULTS, args.config, _flag_values(args, RENDER_KEYS))
    manifest = load_manifest(args.manifest)
    out = _resolve_out(args.out, "renders")
    poses_for(cfg["views"], 0, cfg["width"], cfg["height"], cfg["radius"], cfg["jitter"])
    write_resolved(out, "render", cfg, {"manifest": str(args.manifest)})
    n_maps = 0
    for e in manifest.entries:
        mesh = load_obj(_mesh_path(args.manifest, e))
        n_maps += _render_shape(mesh, e.shape_id, out, cfg)
    print(f"shapes={len(manifest.entries)}")
    print(f"maps={n_maps}")
    print(f"out={out}")
    return 0


def cmd_cloud_build(args) -> int:
    maps_dir = Path(args.maps)
    shape_id = args.shape_id or maps_dir.name
    maps = _load_maps(maps_dir)
    cloud = build_cloud(maps, args.top_frac, args.n, args.seed, shape_id=shape_id)
    out = _resolve_out(args.out, f"{shape_id}.fcld")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_fcld(cloud, out)
    print(f"points={cloud.n_points}")
    print(f"out={out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(TRAIN_KEYS, TRAIN_DEFAULTS, args.config, _flag_values(args, TRAIN_KEYS))
    config = _train_config_from(cfg)
    manifest = load_manifest(args.manifest)
    clouds = _load_clouds(manifest, args.clouds)
    out = _resolve_out(args.out, "run")
    write_resolved(out, "train", cfg, {"manifest": str(args.manifest)})
    run = train(manifest, clouds, config, out)
    for head in config.heads():
        info = run.heads[head]
        print(
            f"head={head} best_epoch={info['best_epoch']}"
            f" best_val_loss={info['best_val_loss']!r}"
        )
    print(f"epochs={len(run.records)}")
    print(f"out={out}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(EVAL_KEYS, EVAL_DEFAULTS, args.config, _flag_values(args, EVAL_KEYS))
    run_dir = Path(args.run)
    run_doc = json.loads((run_dir / "run.json").read_text())
    config = TrainConfig.from_dict(run_doc["config"])
    manifest = load_manifest(args.manifest)
    clouds = _load_clouds(manifest, args.clouds)
    out = _resolve_out(args.out, "report")
    write_resolved(out, "eval", cfg, {"run": str(run_dir), "manifest": str(args.manifest)})
    thresholds = {
        "volume": cfg["volume_split_threshold"],
        "surface": cfg["surface_split_threshold"],
    }
    for head in config.heads():
        records = _eval_head(run_dir, head, manifest, clouds, config, cfg["split"])
        evaluation.save_records(records, out / f"{head}_records.csv")
        summary = evaluation.summarize(records)
        rho = (
            evaluation.confidence_error_association(records)
            if len(records) >= 5
            else float("nan")
        )
        doc = dict(summary.to_dict())
        doc["spearman_sigma_abs_err"] = None if math.isnan(rho) else rho
        with open(out / f"{head}_summary.json", "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        above, below = evaluation.split_histogram(records, thresholds[head], cfg["bins"])
        evaluation.save_histograms(above, below, out / f"{head}_hist.csv")
        print(
            f"head={head} n={summary.n} mape_median={summary.mape_median!r}"
            f" mape_mean={summary.mape_mean!r} mae={summary.mae!r}"
        )
    print(f"out={out}")
    return 0


# ---------------------------------------------------------------------------
# ablation grids

VIEW_GRID_VIEWS = ("ring30", "sector16_80deg")
VIEW_GRID_RESOLUTIONS = (2048, 22000)
VIEW_GRID_SELECTIONS = ("all", "top25")
LOSS_GRID_CELLS = tuple(sorted(losses.PRESETS))
_SELECTION_FRACTIONS = {"all": 1.0, "top25": 0.25}

ABLATION_METRIC_COLUMNS = ("mae", "mape_mean", "mape_median", "rmse")


def grid_cells(grid: str, cfg: dict) -> list:
    """Expand a named grid into per-cell config dicts (declared order)."""
    if grid == "views":
        return [
            {"cell": f"{v}-{r}-{s}", "views": v, "resolution": r, "selection": s,
             "loss": cfg["loss"]}
            for v in VIEW_GRID_VIEWS
            for r in VIEW_GRID_RESOLUTIONS
            for s in VIEW_GRID_SELECTIONS
        ]
    if grid == "loss":
        return [
            {"cell": name, "views": cfg["views"], "resolution": cfg["resolution"],
             "selection": cfg["selection"], "loss": name}
            for name in LOSS_GRID_CELLS
        ]
    raise ConfigError(f"unknown grid '{grid}' (want views or loss)")


def select_cells(cells: list, spec: str) -> list:
    """--cells 'a,b,c' with 'a..b' inclusive ranges over the declared order."""
    if spec is None:
        return list(cells)
    names = [c["cell"] for c in cells]
    chosen = []
    for tok in spec.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if ".." in tok:
            lo, hi = (t.strip() for t in tok.split("..", 1))
            if lo not in names or hi not in names:
                raise ConfigError(f"unknown cell range '{tok}'")
            i, j = names.index(lo), names.index(hi)
            if i > j:
                raise ConfigError(f"empty cell range '{tok}'")
            chosen.extend(names[i : j + 1])
        elif tok in names:
            chosen.append(tok)
        else:
            raise ConfigError(f"unknown cell '{tok}' (known: {', '.join(names)})")
    seen = set()
    picked = [n for n in chosen if not (n in seen or seen.add(n))]
    by_name = {c["cell"]: c for c in cells}
    return [by_name[n] for n in picked]


def _digest(obj) -> str:
    blob = json.dumps(_jsonable(obj), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _render_views_set(out_dir: Path, manifest_path, manifest, cfg: dict, views: str) -> Path:
    """Render (or reuse) the shared per-views-layout point maps."""
    render_dir = out_dir / "renders" / views
    marker = render_dir / ".render_config.json"
    stamp = {
        "views": views,
        "width": cfg["width"],
        "height": cfg["height"],
        "noise_sigma": cfg["noise_sigma"],
        "radius": cfg["radius"],
        "jitter": cfg["jitter"],
        "seed": cfg["seed"],
        "manifest_digest": _file_digest(manifest_path),
    }
    if marker.is_file():
        if json.loads(marker.read_text()) != _jsonable(stamp):
            raise ConfigError(
                f"{render_dir} was rendered with a different config; use a fresh --out"
            )
        return render_dir
    rc = dict(cfg)
    rc["views"] = views
    for e in manifest.entries:
        mesh = load_obj(_mesh_path(manifest_path, e))
        _render_shape(mesh, e.shape_id, render_dir, rc)
    with open(marker, "w") as fh:
        json.dump(_jsonable(stamp), fh, indent=2, sort_keys=True)
    return render_dir


def _run_cell(packed) -> dict:
    """One grid cell end-to-end: clouds -> train -> per-head val metrics.

    Module-level and dict-argumented so worker processes can run it.
    """
    out_dir, manifest_path, cell, cfg = (
        Path(packed["out_dir"]),
        Path(packed["manifest"]),
        packed["cell"],
        packed["cfg"],
    )
    cell_dir = out_dir / "cells" / cell["cell"]
    stamp = {"cell": cell, "cfg": {k: v for k, v in cfg.items() if k != "views"},
             "manifest_digest": _file_digest(manifest_path)}
    done = cell_dir / "DONE"
    if done.is_file():
        if done.read_text().strip() != _digest(stamp):
            raise ConfigError(
                f"cell {cell['cell']} was completed with a different config;"
                f" use a fresh --out"
            )
        return json.loads((cell_dir / "row.json").read_text())

    t0 = time.perf_counter()
    manifest = load_manifest(manifest_path)
    render_dir = out_dir / "renders" / cell["views"]
    resolution = cell["resolution"]
    # clouds stay at the selected stage; the trainer draws `resolution`-point
    # subsets from them, so augmented mode sees genuinely different subsets
    clouds = {}
    for e in manifest.entries:
        maps = _load_maps(render_dir / e.shape_id)
        merged = merge_pointmaps(maps, shape_id=e.shape_id)
        clouds[e.shape_id] = select_top_confidence(
            merged, _SELECTION_FRACTIONS[cell["selection"]]
        )
    config = _train_config_from(cfg, loss=cell["loss"], subsample_n=resolution)
    cell_dir.mkdir(parents=True, exist_ok=True)
    run = train(manifest, clouds, config, cell_dir)

    row = {
        "cell": cell["cell"],
        "views": cell["views"],
        "resolution": resolution,
        "selection": cell["selection"],
        "loss": cell["loss"],
        "n_train": len(manifest.split("train")),
        "n_val": len(manifest.split("val")),
        "epochs": len(run.records),
    }
    for head in config.heads():
        records = _eval_head(cell_dir, head, manifest, clouds, config, "val")
        evaluation.save_records(records, cell_dir / f"{head}_records.csv")
        s = evaluation.summarize(records)
        row[f"{head}_mae"] = s.mae
        row[f"{head}_mape_mean"] = s.mape_mean
        row[f"{head}_mape_median"] = s.mape_median
        row[f"{head}_rmse"] = s.rmse
    row["seconds"] = time.perf_counter() - t0
    with open(cell_dir / "row.json", "w") as fh:
        json.dump(_jsonable(row), fh, indent=2, sort_keys=True)
        fh.write("\n")
    done.write_text(_digest(stamp) + "\n")
    return row


def cmd_ablate(args) -> int:
    cfg = resolve_config(ABLATE_KEYS, ABLATE_DEFAULTS, args.config, _flag_values(args, ABLATE_KEYS))
    if args.parallel < 1:
        raise ConfigError(f"--parallel must be >= 1, got {args.parallel}")
    cells = select_cells(grid_cells(args.grid, cfg), args.cells)
    if not cells:
        raise ConfigError("empty grid: no cells selected")  # before any mkdir
    manifest = load_manifest(args.manifest)
    out = _resolve_out(args.out, f"ablate_{args.grid}")
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(
        out, "ablate", cfg,
        {"grid": args.grid, "cells": [c["cell"] for c in cells],
         "manifest": str(args.manifest), "parallel": args.parallel},
    )

    # shared renders first: cells only read them, so workers never race
    for views in sorted({c["views"] for c in cells}):
        _render_views_set(out, args.manifest, manifest, cfg, views)

    packed = [
        {"out_dir": str(out), "manifest": str(args.manifest), "cell": c, "cfg": cfg}
        for c in cells
    ]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_run_cell, packed))
    else:
        rows = [_run_cell(p) for p in packed]

    heads = ("volume", "surface") if cfg["target"] == "both" else (cfg["target"],)
    columns = [
        "cell", "views", "resolution", "selection", "loss",
        "n_train", "n_val", "epochs",
    ]
    for head in heads:
        columns.extend(f"{head}_{m}" for m in ABLATION_METRIC_COLUMNS)
    columns.append("seconds")
    csv_path = out / "combined.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    for row in rows:
        print(f"cell={row['cell']} epochs={row['epochs']}")
    print(f"rows={len(rows)}")
    print(f"csv={csv_path}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="shapemetrics",
        description="Volume/surface estimation pipeline for watertight 3D shapes.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="dataset generation and filtering")
    synth_sub = synth.add_subparsers(dest="subcommand", required=True)
    gen = synth_sub.add_parser("gen", help="generate meshes + manifest")
    gen.add_argument("--config", default=None)
    gen.add_argument("--out", default=None)
    _add_key_flags(gen, GEN_KEYS)
    gen.set_defaults(func=cmd_synth_gen)
    filt = synth_sub.add_parser("filter", help="drop worst-predicted samples")
    filt.add_argument("--manifest", required=True)
    filt.add_argument("--preds", required=True, help="CSV with id,gt,pred columns")
    filt.add_argument("--fraction", type=float, default=0.03)
    filt.add_argument("--criterion", default="either", choices=("abs", "rel", "either"))
    filt.add_argument("--out", required=True, help="outcome JSON path")
    filt.add_argument("--out-manifest", default=None, help="write filtered manifest here")
    filt.set_defaults(func=cmd_synth_filter)

    geom = sub.add_parser("geom", help="mesh measurements")
    geom_sub = geom.add_subparsers(dest="subcommand", required=True)
    stats = geom_sub.add_parser("stats", help="key=value report for one mesh")
    stats.add_argument("mesh")
    stats.add_argument("--normalize", action="store_true")
    stats.add_argument("--oracle", type=int, default=0, metavar="N")
    stats.add_argument("--seed", type=int, default=0)
    stats.set_defaults(func=cmd_geom_stats)

    render = sub.add_parser("render", help="simulated multi-view point maps")
    render.add_argument("--manifest", required=True)
    render.add_argument("--config", default=None)
    render.add_argument("--out", default=None)
    _add_key_flags(render, RENDER_KEYS)
    render.set_defaults(func=cmd_render)

    cloud = sub.add_parser("cloud", help="feature-cloud construction")
    cloud_sub = cloud.add_subparsers(dest="subcommand", required=True)
    build = cloud_sub.add_parser("build", help="merge/select/subsample one shape")
    build.add_argument("--maps", required=True, help="directory of .pmap files")
    build.add_argument("--top-frac", type=float, default=1.0)
    build.add_argument("--n", type=int, default=40000)
    build.add_argument("--seed", type=int, default=0)
    build.add_argument("--shape-id", default=None)
    build.add_argument("--out", default=None)
    build.set_defaults(func=cmd_cloud_build)

    tr = sub.add_parser("train", help="fit volume/surface heads")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--clouds", required=True, help="directory of <shape_id>.fcld")
    tr.add_argument("--config", default=None)
    tr.add_argument("--out", default=None)
    _add_key_flags(tr, TRAIN_KEYS)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="metrics report for a finished run")
    ev.add_argument("--run", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--clouds", required=True)
    ev.add_argument("--config", default=None)
    ev.add_argument("--out", default=None)
    _add_key_flags(ev, EVAL_KEYS)
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="run a named config grid")
    ab.add_argument("--grid", required=True, choices=("views", "loss"))
    ab.add_argument("--cells", default=None, help="comma list, 'a..b' ranges allowed")
    ab.add_argument("--manifest", required=True)
    ab.add_argument("--parallel", type=int, default=1)
    ab.add_argument("--config", default=None)
    ab.add_argument("--out", default=None)
    _add_key_flags(ab, ABLATE_KEYS)
    ab.set_defaults(func=cmd_ablate)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
