"""End-to-end reproduction: textures, a short training run and a small sweep must match the stored CSV."""
import json
from pathlib import Path

from vshuffle import cli

GOLDEN = Path(__file__).parent / "golden"


def reproduce(root: Path) -> bytes:
    plan = json.loads((GOLDEN / "repro_sweep.json").read_text())
    for cmd in ("train", "textures"):
        cfg = root / f"{cmd}.json"
        cfg.write_text(json.dumps(plan[cmd]))
        assert cli.main([cmd, "--config", str(cfg), "--out", str(root / cmd)]) == 0
    img = root / "textures"
    sweep = {
        **plan["sweep"],
        "checkpoint": str(root / "train" / "model.vshf"),
        "content": str(img / "shapes_0.png"),
        "styles": [str(img / f"blue-blobs_{i}.png") for i in range(2)],
    }
    cfg = root / "sweep.json"
    cfg.write_text(json.dumps(sweep))
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(root / "sweep")]) == 0
    return (root / "sweep" / "sweep.csv").read_bytes()


def test_repro_sweep_matches_golden(tmp_path):
    assert reproduce(tmp_path) == (GOLDEN / "repro_sweep.csv").read_bytes()
