"""End-to-end command tests: config grammar, exit codes, pipeline wiring."""
import csv
import json

import pytest

from shapemetrics import cli, evaluation
from shapemetrics.errors import ConfigError, NumericError


# --- config file grammar -------------------------------------------------------


def test_parse_config_values():
    text = """
# full-line comment
lr = 1.6e-4
max_epochs = 650
augment = true
loss = loss5
name = "quoted string"
channels = 32,32,64
"""
    cfg = cli.parse_config_text(text)
    assert cfg["lr"] == pytest.approx(1.6e-4)
    assert cfg["max_epochs"] == 650
    assert cfg["augment"] is True
    assert cfg["loss"] == "loss5"
    assert cfg["name"] == "quoted string"
    assert cfg["channels"] == (32, 32, 64)


def test_parse_config_rejects_duplicates_and_garbage():
    with pytest.raises(ConfigError):
        cli.parse_config_text("a = 1\na = 2\n")
    with pytest.raises(ConfigError):
        cli.parse_config_text("just some words\n")
    with pytest.raises(ConfigError):
        cli.parse_config_text("= 3\n")


def test_resolve_config_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("max_epochs = 5\nlr = 0.01\n")
    cfg = cli.resolve_config(
        cli.TRAIN_KEYS, cli.TRAIN_DEFAULTS, path, {"lr": "0.5"}
    )
    assert cfg["max_epochs"] == 5  # file overrides default
    assert cfg["lr"] == 0.5  # flag overrides file
    assert cfg["patience"] == cli.TRAIN_DEFAULTS["patience"]


def test_resolve_config_unknown_key(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("bogus = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        cli.resolve_config(cli.TRAIN_KEYS, cli.TRAIN_DEFAULTS, path, {})


def test_resolve_config_missing_file():
    with pytest.raises(ConfigError):
        cli.resolve_config(cli.TRAIN_KEYS, cli.TRAIN_DEFAULTS, "/nope/missing.cfg", {})


def test_casters():
    assert cli._as_bool("on", "x") is True
    assert cli._as_bool("off", "x") is False
    assert cli._as_int_tuple("8,16", "x") == (8, 16)
    assert cli._as_int_tuple(8, "x") == (8,)
    with pytest.raises(ConfigError):
        cli._as_int("1.5", "x")
    with pytest.raises(ConfigError):
        cli._as_bool(3.5, "x")


# --- grids ----------------------------------------------------------------------


def test_grid_cells_views_shape():
    cells = cli.grid_cells("views", dict(cli.ABLATE_DEFAULTS))
    names = [c["cell"] for c in cells]
    assert len(names) == 8
    assert names[0] == "ring30-2048-all"
    assert "sector16_80deg-22000-top25" in names
    assert len(set(names)) == 8


def test_grid_cells_loss_shape():
    cells = cli.grid_cells("loss", dict(cli.ABLATE_DEFAULTS))
    assert [c["cell"] for c in cells] == [f"loss{i}" for i in range(1, 7)]
    assert all(c["loss"] == c["cell"] for c in cells)


def test_select_cells_ranges():
    cells = cli.grid_cells("loss", dict(cli.ABLATE_DEFAULTS))
    assert [c["cell"] for c in cli.select_cells(cells, None)] == [
        f"loss{i}" for i in range(1, 7)
    ]
    picked = cli.select_cells(cells, "loss2..loss4")
    assert [c["cell"] for c in picked] == ["loss2", "loss3", "loss4"]
    picked = cli.select_cells(cells, "loss5,loss1,loss1")
    assert [c["cell"] for c in picked] == ["loss5", "loss1"]
    with pytest.raises(ConfigError):
        cli.select_cells(cells, "loss9")
    with pytest.raises(ConfigError):
        cli.select_cells(cells, "loss4..loss2")


# --- pipeline fixture -------------------------------------------------------------


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Tiny dataset -> renders -> clouds, shared by the command tests."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    ds = root / "ds"
    assert (
        cli.main(
            [
                "synth", "gen", "--out", str(ds), "--train", "3", "--val", "2",
                "--families", "superquadric", "--subdivision", "2", "--seed", "5",
            ]
        )
        == 0
    )
    manifest = ds / "manifest.jsonl"
    maps = root / "maps"
    assert (
        cli.main(
            [
                "render", "--manifest", str(manifest), "--out", str(maps),
                "--views", "ring6", "--width", "48", "--height", "36", "--seed", "5",
            ]
        )
        == 0
    )
    clouds = root / "clouds"
    for shape_dir in sorted(maps.iterdir()):
        if not shape_dir.is_dir():
            continue
        assert (
            cli.main(
                [
                    "cloud", "build", "--maps", str(shape_dir), "--n", "64",
                    "--seed", "3", "--out", str(clouds / f"{shape_dir.name}.fcld"),
                ]
            )
            == 0
        )
    return {"root": root, "manifest": manifest, "clouds": clouds, "maps": maps}


TINY_NET_FLAGS = [
    "--k", "4", "--channels", "8,8", "--mlp-hidden", "16",
    "--subsample-n", "48", "--t-max", "60",
]


# --- individual commands -----------------------------------------------------------


def test_geom_stats_report(pipeline, capsys):
    mesh = next((pipeline["manifest"].parent / "meshes").glob("*.obj"))
    assert cli.main(["geom", "stats", str(mesh), "--normalize"]) == 0
    out = dict(
        line.split("=", 1) for line in capsys.readouterr().out.strip().splitlines()
    )
    assert out["watertight"] == "true"
    assert 0.0 < float(out["volume"]) <= 1.0
    assert float(out["surface_area"]) > 0.0
    assert "normalize_scale" in out


def test_geom_stats_oracle_close(pipeline, capsys):
    mesh = next((pipeline["manifest"].parent / "meshes").glob("*.obj"))
    assert cli.main(["geom", "stats", str(mesh), "--oracle", "20000", "--seed", "1"]) == 0
    out = dict(
        line.split("=", 1) for line in capsys.readouterr().out.strip().splitlines()
    )
    assert abs(float(out["volume_minus_mc"])) <= 4.0 * float(out["mc_stderr"])


def test_train_and_eval_commands(pipeline, tmp_path, capsys):
    run = tmp_path / "run"
    rc = cli.main(
        [
            "train", "--manifest", str(pipeline["manifest"]),
            "--clouds", str(pipeline["clouds"]), "--out", str(run),
            "--target", "volume", "--loss", "loss5", "--max-epochs", "2",
            "--patience", "1", "--seed", "2", *TINY_NET_FLAGS,
        ]
    )
    assert rc == 0
    assert (run / "run.json").is_file()
    assert (run / "epochs.csv").is_file()
    assert (run / "volume_best.ckpt").is_file()
    assert (run / "resolved_config.json").is_file()
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["command"] == "train"
    assert resolved["config"]["max_epochs"] == 2

    report = tmp_path / "report"
    rc = cli.main(
        [
            "eval", "--run", str(run), "--manifest", str(pipeline["manifest"]),
            "--clouds", str(pipeline["clouds"]), "--out", str(report),
        ]
    )
    assert rc == 0
    records = evaluation.load_records(report / "volume_records.csv")
    assert len(records) == 2  # val split size
    summary = json.loads((report / "volume_summary.json").read_text())
    assert summary["n"] == 2
    assert summary["mape_median"] >= 0.0
    with open(report / "volume_hist.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 20  # two partitions x default bins
    out = capsys.readouterr().out
    assert "head=volume" in out


def test_train_flag_overrides_config_file(pipeline, tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text(
        "max_epochs = 5\npatience = 1\ntarget = volume\nsubsample_n = 48\n"
        "k = 4\nchannels = 8,8\nmlp_hidden = 16\n"
    )
    run = tmp_path / "run"
    rc = cli.main(
        [
            "train", "--manifest", str(pipeline["manifest"]),
            "--clouds", str(pipeline["clouds"]), "--out", str(run),
            "--config", str(cfg), "--max-epochs", "1",
        ]
    )
    assert rc == 0
    doc = json.loads((run / "run.json").read_text())
    assert doc["n_epochs"] == 1
    assert doc["config"]["max_epochs"] == 1


def test_synth_filter_command(pipeline, tmp_path):
    preds = tmp_path / "preds.csv"
    with open(preds, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "gt", "pred"])
        for i, err in enumerate((0.01, 0.02, 0.3, 0.4)):
            w.writerow([f"s{i:04d}", "1.0", str(1.0 + err)])
    out = tmp_path / "outcome.json"
    filtered = tmp_path / "filtered.jsonl"
    rc = cli.main(
        [
            "synth", "filter", "--manifest", str(pipeline["manifest"]),
            "--preds", str(preds), "--fraction", "0.25", "--criterion", "abs",
            "--out", str(out), "--out-manifest", str(filtered),
        ]
    )
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["rejected_ids"] == ["s0003"]
    kept_lines = [ln for ln in filtered.read_text().splitlines() if ln.strip()]
    assert len(kept_lines) == 4  # 5 entries minus the rejected one


# --- exit codes ---------------------------------------------------------------------


def test_exit_code_config_error(pipeline, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus_key = 3\n")
    rc = cli.main(
        [
            "train", "--manifest", str(pipeline["manifest"]),
            "--clouds", str(pipeline["clouds"]), "--out", str(tmp_path / "r"),
            "--config", str(cfg),
        ]
    )
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_exit_code_data_error(pipeline, tmp_path, capsys):
    rc = cli.main(
        [
            "train", "--manifest", str(pipeline["manifest"]),
            "--clouds", str(tmp_path / "empty"), "--out", str(tmp_path / "r"),
            *TINY_NET_FLAGS,
        ]
    )
    assert rc == 3
    assert "data error" in capsys.readouterr().err


def test_exit_code_numeric_error(pipeline, tmp_path, capsys, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericError("aborted: too many non-finite steps")

    monkeypatch.setattr(cli, "train", boom)
    rc = cli.main(
        [
            "train", "--manifest", str(pipeline["manifest"]),
            "--clouds", str(pipeline["clouds"]), "--out", str(tmp_path / "r"),
            "--max-epochs", "1", *TINY_NET_FLAGS,
        ]
    )
    assert rc == 4
    assert "numeric error" in capsys.readouterr().err


def test_out_env_fallback(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path / "envroot"))
    rc = cli.main(
        [
            "synth", "gen", "--train", "1", "--val", "1",
            "--families", "superquadric", "--subdivision", "2",
        ]
    )
    assert rc == 0
    assert (tmp_path / "envroot" / "synth" / "manifest.jsonl").is_file()


def test_out_required_without_env(monkeypatch, capsys):
    monkeypatch.delenv(cli.OUT_ROOT_ENV, raising=False)
    rc = cli.main(
        ["synth", "gen", "--train", "1", "--val", "1", "--subdivision", "2"]
    )
    assert rc == 2
    assert cli.OUT_ROOT_ENV in capsys.readouterr().err


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "shapemetrics" in capsys.readouterr().out


# --- ablate --------------------------------------------------------------------------


ABLATE_TOY_FLAGS = [
    "--width", "48", "--height", "36", "--max-epochs", "2", "--patience", "1",
    "--target", "volume", "--seed", "2", "--resolution", "64",
    "--k", "4", "--channels", "8,8", "--mlp-hidden", "16", "--views", "ring6",
]


def test_ablate_loss_cells_and_idempotency(pipeline, tmp_path):
    out = tmp_path / "ab"
    argv = [
        "ablate", "--grid", "loss", "--cells", "loss1,loss2",
        "--manifest", str(pipeline["manifest"]), "--out", str(out),
        *ABLATE_TOY_FLAGS,
    ]
    assert cli.main(argv) == 0
    combined = (out / "combined.csv").read_bytes()
    with open(out / "combined.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["cell"] for r in rows] == ["loss1", "loss2"]
    assert [r["loss"] for r in rows] == ["loss1", "loss2"]
    for r in rows:
        assert float(r["volume_mape_median"]) >= 0.0
        assert float(r["volume_rmse"]) >= float(r["volume_mae"]) - 1e-12
        assert int(r["epochs"]) == 2
    assert (out / "cells" / "loss1" / "DONE").is_file()

    # identical rerun is a no-op and reproduces the same table
    assert cli.main(argv) == 0
    assert (out / "combined.csv").read_bytes() == combined


def test_ablate_rejects_changed_config(pipeline, tmp_path, capsys):
    out = tmp_path / "ab"
    base = [
        "ablate", "--grid", "loss", "--cells", "loss1",
        "--manifest", str(pipeline["manifest"]), "--out", str(out),
        *ABLATE_TOY_FLAGS,
    ]
    assert cli.main(base) == 0
    changed = list(base)
    changed[changed.index("--max-epochs") + 1] = "3"
    assert cli.main(changed) == 2
    assert "different config" in capsys.readouterr().err


def test_ablate_empty_grid_creates_nothing(pipeline, tmp_path, capsys):
    out = tmp_path / "never"
    rc = cli.main(
        [
            "ablate", "--grid", "loss", "--cells", ",",
            "--manifest", str(pipeline["manifest"]), "--out", str(out),
        ]
    )
    assert rc == 2
    assert not out.exists()
    assert "empty grid" in capsys.readouterr().err


def test_ablate_views_cells_parallel(pipeline, tmp_path):
    out = tmp_path / "abv"
    rc = cli.main(
        [
            "ablate", "--grid", "views",
            "--cells", "ring30-2048-all,sector16_80deg-2048-top25",
            "--manifest", str(pipeline["manifest"]), "--out", str(out),
            "--parallel", "2", "--width", "48", "--height", "36",
            "--max-epochs", "2", "--patience", "1", "--target", "volume",
            "--seed", "2", "--k", "4", "--channels", "8,8", "--mlp-hidden", "16",
        ]
    )
    assert rc == 0
    with open(out / "combined.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert rows[0]["views"] == "ring30"
    assert rows[1]["selection"] == "top25"
    assert (out / "renders" / "ring30").is_dir()
    assert (out / "renders" / "sector16_80deg").is_dir()
