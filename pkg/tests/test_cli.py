import csv
import json

import pytest

from vshuffle import cli, textures
from vshuffle.evalkit import CSV_HEADER
from vshuffle.imageio import read_png, to_uint8, write_png

FAST = ["--T", "3", "--inner-steps", "1", "--blocks", "12", "14"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A one-step checkpoint plus a few texture PNGs, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["train", "--out", str(root / "ckpt"), "--steps", "1", "--per-domain", "1"]) == 0
    assert cli.main(["textures", "--out", str(root / "img"), "--count", "3", "--domains", "shapes", "red-stripes"]) == 0
    return root


def paths(root):
    img = root / "img"
    return {
        "ckpt": str(root / "ckpt" / "model.vshf"),
        "content": str(img / "shapes_0.png"),
        "styles": [str(img / f"red-stripes_{i}.png") for i in range(3)],
    }


def stylize(root, out, *extra, styles=1):
    p = paths(root)
    argv = ["stylize", "--out", str(out), "--checkpoint", p["ckpt"], "--content", p["content"]]
    for s in p["styles"][:styles]:
        argv += ["--style", s]
    return cli.main(argv + FAST + list(extra))


# ---------------------------------------------------------------- parsing and config


def test_usage_errors_exit_2(tmp_path, capsys):
    assert cli.main([]) == 2
    assert cli.main(["nope"]) == 2
    assert cli.main(["stylize", "--alpha", "x"]) == 2
    assert cli.main(["textures"]) == 2
    assert "output directory" in capsys.readouterr().err


def test_config_schema_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"out": str(tmp_path / "o"), "alhpa": 0.3}))
    assert cli.main(["stylize", "--config", str(cfg)]) == 2
    cfg.write_text("{not json")
    assert cli.main(["stylize", "--config", str(cfg)]) == 2
    assert cli.main(["stylize", "--config", str(tmp_path / "missing.json")]) == 2
    assert not (tmp_path / "o").exists()


def test_precedence_flag_over_file_over_default(tmp_path):
    file_cfg = {"alpha": 0.7, "beta": 0.5, "out": "x"}
    cfg = cli.resolve_config("stylize", file_cfg, {"alpha": 0.1, "beta": None})
    assert cfg["alpha"] == 0.1 and cfg["beta"] == 0.5 and cfg["lr"] == 0.05
    sweep = cli.resolve_config("sweep", {"out": "x", "base": {"T": 7}}, {})
    assert sweep["base"]["T"] == 7 and sweep["base"]["lr"] == 0.05


def test_flag_values_are_schema_checked():
    with pytest.raises(cli.UsageError):
        cli.resolve_config("stylize", {"out": "x"}, {"alpha": 1.5})
    with pytest.raises(cli.UsageError):
        cli.resolve_config("stylize", {"out": "x"}, {"T": 0})


def test_dump_json_is_canonical():
    assert cli.dump_json({"b": 1, "a": [1, 2]}) == '{\n  "a": [\n    1,\n    2\n  ],\n  "b": 1\n}\n'


# ---------------------------------------------------------------- train / textures


def test_train_zero_steps_and_record(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path), "--steps", "0", "--per-domain", "1"]) == 0
    rec = json.loads((tmp_path / "run.json").read_text())
    assert rec["command"] == "train" and rec["config"]["steps"] == 0
    assert rec["config"]["denoiser"]["image_size"] == 32
    assert (tmp_path / "model.vshf").read_bytes()[:4] == b"VSHF"


def test_train_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["train", "--out", str(tmp_path / name), "--steps", "2", "--per-domain", "1"]) == 0
    assert (tmp_path / "a" / "model.vshf").read_bytes() == (tmp_path / "b" / "model.vshf").read_bytes()


def test_train_from_png_folder(tmp_path):
    for i, im in enumerate(textures.make_texture_dataset("constant", 2, 0, size=8)):
        write_png(tmp_path / f"{i}.png", to_uint8(im))
    out = tmp_path / "o"
    assert cli.main(["train", "--out", str(out), "--data", str(tmp_path), "--steps", "1", "--batch-size", "2"]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"denoiser": {"image_size": 8}}))
    assert cli.main(["train", "--config", str(cfg), "--out", str(out), "--data", str(tmp_path), "--steps", "1"]) == 0
    assert cli.main(["train", "--out", str(out), "--data", str(tmp_path / "empty")]) == 2


def test_textures_unknown_domain(tmp_path):
    assert cli.main(["textures", "--out", str(tmp_path), "--domains", "plaid"]) == 2


# ---------------------------------------------------------------- stylize


def test_missing_checkpoint_writes_nothing(tmp_path, workdir):
    p = paths(workdir)
    out = tmp_path / "o"
    code = cli.main(["stylize", "--out", str(out), "--checkpoint", str(tmp_path / "nope.vshf"),
                     "--content", p["content"], "--style", p["styles"][0]])
    assert code == 2 and not out.exists()


def test_method_style_count_mismatch(tmp_path, workdir, capsys):
    out = tmp_path / "o"
    assert stylize(workdir, out, "--method", "ad", styles=2) == 2
    assert "n=1" in capsys.readouterr().err and not out.exists()
    assert stylize(workdir, out, "--method", "styleid", styles=3) == 2


def test_stylize_outputs_and_record(tmp_path, workdir):
    out = tmp_path / "o"
    assert stylize(workdir, out, "--alpha", "0.3", styles=2) == 0
    assert read_png(out / "stylized.png").shape == (3, 32, 32)
    rec = json.loads((out / "run.json").read_text())
    assert rec["config"]["alpha"] == 0.3 and rec["config"]["beta"] == 0.24
    assert rec["transfer"]["n"] == 2 and rec["transfer"]["effective_tau"] == 1.0
    assert rec["timesteps"] == [3, 2, 1] and len(rec["inputs"]["styles"]) == 2
    assert json.loads((out / "timing.json").read_text())["elapsed_seconds"] >= 0


def test_stylize_run_record_is_reproducible(tmp_path, workdir):
    assert stylize(workdir, tmp_path / "a") == 0
    assert stylize(workdir, tmp_path / "a2") == 0
    a = json.loads((tmp_path / "a" / "run.json").read_text())
    b = json.loads((tmp_path / "a2" / "run.json").read_text())
    a["config"].pop("out"), b["config"].pop("out")
    assert a == b
    assert (tmp_path / "a" / "stylized.png").read_bytes() == (tmp_path / "a2" / "stylized.png").read_bytes()


def test_alpha_zero_png_matches_ad(tmp_path, workdir):
    assert stylize(workdir, tmp_path / "ad", "--method", "ad") == 0
    assert stylize(workdir, tmp_path / "v0", "--alpha", "0") == 0
    assert (tmp_path / "ad" / "stylized.png").read_bytes() == (tmp_path / "v0" / "stylized.png").read_bytes()


def test_untrained_checkpoint_is_runtime_error(tmp_path, workdir, capsys):
    assert cli.main(["train", "--out", str(tmp_path / "c"), "--steps", "0", "--per-domain", "1"]) == 0
    p = paths(workdir)
    code = cli.main(["stylize", "--out", str(tmp_path / "o"), "--checkpoint", str(tmp_path / "c" / "model.vshf"),
                     "--content", p["content"], "--style", p["styles"][0]] + FAST)
    assert code == 1 and "untrained" in capsys.readouterr().err


# ---------------------------------------------------------------- sweep


def _sweep_cfg(tmp_path, workdir, grid, **extra):
    p = paths(workdir)
    cfg = {
        "checkpoint": p["ckpt"], "content": p["content"], "styles": p["styles"],
        "base": {"T": 3, "inner_steps": 1, "blocks": [12, 14]}, "grid": grid, **extra,
    }
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_sweep_empty_grid_is_usage_error(tmp_path, workdir):
    cfg = _sweep_cfg(tmp_path, workdir, {"alpha": []})
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_sweep_single_cell(tmp_path, workdir):
    cfg = _sweep_cfg(tmp_path, workdir, {})
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = list(csv.DictReader((tmp_path / "o" / "sweep.csv").open()))
    assert len(rows) == 1 and rows[0]["pareto"] == "true"
    assert list(rows[0]) == list(CSV_HEADER)


def test_sweep_grid_expansion_and_parallel_determinism(tmp_path, workdir):
    grid = {"method": ["ad", "vshuffle"], "alpha": [0.0, 0.5], "n": [1, 2]}
    cfg = _sweep_cfg(tmp_path, workdir, grid)
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "p1"), "--parallelism", "1"]) == 0
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "p4"), "--parallelism", "4"]) == 0
    a, b = (tmp_path / "p1" / "sweep.csv").read_bytes(), (tmp_path / "p4" / "sweep.csv").read_bytes()
    assert a == b
    rows = list(csv.DictReader(a.decode().splitlines()))
    # ad keeps only n=1 cells: 2 + 4
    assert [(r["method"], r["n"]) for r in rows].count(("ad", "1")) == 2 and len(rows) == 6


def test_sweep_too_few_styles(tmp_path, workdir):
    cfg = _sweep_cfg(tmp_path, workdir, {"n": [5]})
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------- pca / ablation / verify


def test_pca_command(tmp_path, workdir):
    p = paths(workdir)
    out = tmp_path / "o"
    argv = ["pca", "--out", str(out), "--checkpoint", p["ckpt"], "--T", "4", "--t", "2", "--block", "12"]
    for s in p["styles"][:2]:
        argv += ["--style", s]
    assert cli.main(argv) == 0
    rec = json.loads((out / "run.json").read_text())
    assert len(rec["explained_variance_ratio"]) == 3 and sum(rec["explained_variance_ratio"]) <= 1 + 1e-9
    assert read_png(out / "pca.png").shape == (3, 32, 2 * 32 + 2)
    assert cli.main(argv[:-6] + ["--T", "4", "--t", "9"]) == 2
    assert cli.main(argv + ["--block", "16"]) == 2


def test_ablate_axis_command(tmp_path, workdir):
    p = paths(workdir)
    out = tmp_path / "o"
    argv = ["ablate-axis", "--out", str(out), "--checkpoint", p["ckpt"], "--content", p["content"],
            "--style", p["styles"][0], "--axes", "s", "d"] + FAST
    assert cli.main(argv) == 0
    assert {f.name for f in out.iterdir()} == {"ablation.png", "axis_s.png", "axis_d.png", "run.json"}
    assert set(json.loads((out / "run.json").read_text())["metrics"]) == {"s", "d"}
    assert cli.main(argv + ["--style", p["styles"][1]]) == 2


@pytest.mark.slow
def test_verify_command(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 7 and "FAIL" not in out
