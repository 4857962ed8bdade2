import csv
import itertools
from pathlib import Path

import numpy as np
import pytest
import yaml

from safeskills import cli, harness
from safeskills.config import ConfigError, build_config
from safeskills.nn import TrainingError

TINY = {
    "seed": 3,
    "train": {"episodes": 2, "steps_per_episode": 20, "batch_size": 16, "buffer_capacity": 1000,
              "hidden": [8, 8], "eval_every": 1, "eval_episodes": 1},
    "eval": {"episodes": 3, "steps": 30, "trace_steps": 25},
}
CONDITIONS = ("pi_b-F", "pi_b-U", "L2-F", "L4-U", "pi_c-U")


def tiny_cfg(**extra):
    return build_config({**TINY, **extra})


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = tiny_cfg()
    for skill in harness.TRAIN_ORDER:
        harness.cmd_train(skill, cfg, root)
    return cfg, root


@pytest.fixture(scope="module")
def evaluated(trained):
    cfg, root = trained
    harness.extend_library("L2-F", "L4-U", cfg, root)
    for c in CONDITIONS:
        harness.cmd_eval(c, cfg, root)
    return cfg, root


def rows(path):
    with open(path) as fh:
        return list(csv.reader(ln for ln in fh if not ln.startswith("#")))


def test_train_writes_curve_and_checkpoints(trained):
    cfg, root = trained
    curve = rows(root / "skills" / "stir_curve.csv")
    assert curve[0][:3] == ["episode", "train_return", "eval_return"]
    assert len(curve) - 1 == cfg.train.episodes
    assert (root / "skills" / "stir_best.ckpt").exists()
    assert (root / "skills" / "stir_1.ckpt").exists()


def test_prevention_training_starts_every_episode_risky(trained):
    _, root = trained
    for risk in ("slide", "overturn", "spill"):
        data = harness.read_csv(root / "skills" / f"{risk}_initial_risk.csv")
        assert len(data) >= 2 and all(r[f"rho_{risk}"] == "1" for r in data)


def test_train_is_bitwise_reproducible(tmp_path):
    cfg = tiny_cfg()
    for sub in ("a", "b"):
        harness.cmd_train("spill", cfg, tmp_path / sub)
    for f in ("spill_best.ckpt", "spill_1.ckpt", "spill_curve.csv", "spill_initial_risk.csv"):
        assert (tmp_path / "a/skills" / f).read_bytes() == (tmp_path / "b/skills" / f).read_bytes()


def test_extension_keeps_existing_checkpoints(trained):
    cfg, root = trained
    l2 = harness.build_manifest("L2-F", cfg, root)
    before = {p.name: p.read_bytes() for p in (root / "skills").glob("*.ckpt")}
    report = harness.extend_library("L2-F", "L4-U", cfg, root)
    assert report["unchanged"] and set(report["shared"]) == {"stir", "spill"}
    assert {p.name: p.read_bytes() for p in (root / "skills").glob("*.ckpt")} == before
    names = [s["name"] for s in yaml.safe_load(Path(report["manifest"]).read_text())["skills"]]
    assert names == ["stir", "spill", "slide", "overturn"]
    assert l2.exists()


def test_fixed_conditions_report_na(evaluated):
    _, root = evaluated
    for c in ("pi_b-F", "L2-F"):
        m = harness.read_csv(root / c / "metrics.csv")[0]
        assert m["slide_mean"] == harness.NA and m["overturn_std"] == harness.NA
    m = harness.read_csv(root / "L4-U" / "metrics.csv")[0]
    assert all(m[k] not in ("", harness.NA) for k in harness.METRICS_HEADER)
    assert int(m["episodes"]) == 3


def test_aggregates_recompute_from_episodes(evaluated):
    _, root = evaluated
    for c in CONDITIONS:
        eps = harness.read_csv(root / c / "episodes.csv")
        m = harness.read_csv(root / c / "metrics.csv")[0]
        stir = np.array([float(r["stir_reward"]) for r in eps])
        spill = np.array([float(r["spill_count"]) for r in eps])
        assert float(m["stir_reward_mean"]) == stir.mean() and float(m["stir_reward_std"]) == stir.std()
        assert float(m["spill_mean"]) == spill.mean() and float(m["spill_std"]) == spill.std()
        if m["slide_mean"] != harness.NA:
            d = np.array([float(r["slide_d_mean"]) for r in eps])
            assert float(m["slide_mean"]) == d.mean()


def test_every_csv_carries_config_hash(evaluated):
    cfg, root = evaluated
    found = list(root.rglob("*.csv"))
    assert found
    for path in found:
        assert harness.csv_config_hash(path) == cfg.config_hash(), path


def test_eval_is_reproducible(evaluated, tmp_path):
    cfg, root = evaluated
    first = (root / "L4-U" / "episodes.csv").read_bytes()
    harness.cmd_eval("L4-U", cfg, root)
    assert (root / "L4-U" / "episodes.csv").read_bytes() == first


def independent_orderings(root):
    # Recompute orderings straight from the metric files, without the harness.
    means = {}
    for f in Path(root).glob("*/metrics.csv"):
        with open(f) as fh:
            row = next(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
        means[row["condition"]] = row
    out = set()
    for k in ("stir_reward_mean", "spill_mean", "slide_mean", "overturn_mean"):
        for a, b in itertools.combinations(sorted(means), 2):
            va, vb = means[a][k], means[b][k]
            if "N/A" in (va, vb):
                continue
            va, vb = float(va), float(vb)
            out.add((k, a, b, ">" if va > vb else "<" if va < vb else "="))
    return out


def test_compare_matches_recomputation(evaluated):
    _, root = evaluated
    report = harness.cmd_compare(root)
    assert {(k, a, b, rel) for k, a, b, _, _, rel in report["pairs"]} == independent_orderings(root)
    assert len(report["checks"]) == len(harness.EXPECTED)
    assert (root / "compare.csv").exists() and (root / "checks.csv").exists()


def test_compare_single_condition_is_degenerate(evaluated, tmp_path):
    _, root = evaluated
    (tmp_path / "pi_b-U").mkdir()
    (tmp_path / "pi_b-U" / "metrics.csv").write_bytes((root / "pi_b-U" / "metrics.csv").read_bytes())
    report = harness.cmd_compare(tmp_path)
    assert report["pairs"] == []
    assert all(c[3] == "" for c in report["checks"])


def test_compare_averages_seed_directories(tmp_path):
    for s, val in (("seed_0", 1.0), ("seed_1", 3.0)):
        harness.write_csv(tmp_path / s / "pi_b-F" / "metrics.csv", harness.METRICS_HEADER,
                          [["pi_b-F", "fixed", 1, 1, val, 0.0, 0.0, 0.0] + [harness.NA] * 4], "h")
    assert harness.collect_metrics(tmp_path)["pi_b-F"]["stir_reward_mean"] == 2.0


def test_trace_rows_and_fixed_setup_skill(trained):
    cfg, root = trained
    path = harness.cmd_trace("pi_b-F", cfg, particle=0, root=root, steps=100)
    data = harness.read_csv(path)
    assert len(data) == 100 and {r["skill"] for r in data} == {"stir"}
    assert harness.trace_area(path) >= 0.0
    with pytest.raises(ConfigError, match="out of range"):
        harness.cmd_trace("pi_b-F", cfg, particle=cfg.sim.n_particles, root=root)


def test_hull_area_oracle():
    square = [[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]]
    assert harness.hull_area(square) == pytest.approx(1.0)
    assert harness.hull_area([[0, 0], [1, 1], [2, 2]]) == 0.0
    assert harness.hull_area([[0, 0]]) == 0.0


def test_recovery_output(trained):
    cfg, root = trained
    out = harness.cmd_recovery("L4-U", cfg, root, episodes=2)
    assert set(out) == {"overturn", "spill", "slide"} and all(len(v) == 2 for v in out.values())
    data = harness.read_csv(root / "L4-U" / "recovery.csv")
    assert len(data) == 6 and {r["first_skill"] for r in data if r["risk"] == "slide"} == {"slide"}
    assert harness.recovery_rate([3, 151, -1, 150]) == 0.5


def test_missing_checkpoint_names_file(tmp_path):
    with pytest.raises(harness.MissingArtifactError, match="stir_best.ckpt"):
        harness.cmd_eval("pi_b-F", tiny_cfg(), tmp_path)


def test_custom_condition_from_config(trained, tmp_path):
    cfg, root = trained
    custom = tiny_cfg(conditions={"L3-U": {"setup": "unrestricted", "skills": ["stir", "slide", "spill"]}})
    assert custom.conditions["L3-U"].skills == ("stir", "slide", "spill")
    res = harness.cmd_eval("L3-U", custom, root, episodes=1, steps=10)
    assert res.summary["condition"] == "L3-U"
    with pytest.raises(ConfigError):
        harness.cmd_eval("L9-X", custom, root)


def test_output_root_resolution(monkeypatch, tmp_path):
    cfg = tiny_cfg()
    monkeypatch.setenv(harness.OUTPUT_ENV, str(tmp_path / "env"))
    assert harness.output_root(cfg) == tmp_path / "env"
    assert harness.output_root(cfg, tmp_path / "flag") == tmp_path / "flag"
    monkeypatch.delenv(harness.OUTPUT_ENV)
    assert harness.output_root(cfg) == Path(cfg.output_dir)


def write_cfg(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    good = write_cfg(tmp_path, TINY)
    out = str(tmp_path / "out")
    assert cli.main(["eval", "pi_b-F", "--config", good, "--out", out]) == cli.EXIT_MISSING
    assert "stir_best.ckpt" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  episodes: [1\n")
    assert cli.main(["train", "stir", "--config", str(bad), "--out", out]) == cli.EXIT_CONFIG
    assert "line" in capsys.readouterr().err
    unknown = write_cfg(tmp_path, {"sim": {"gravity": 9.8}}, "unknown.yaml")
    assert cli.main(["train", "stir", "--config", unknown, "--out", out]) == cli.EXIT_CONFIG

    def boom(*a, **k):
        raise TrainingError("critic loss is not finite")

    monkeypatch.setattr(harness, "cmd_train", boom)
    assert cli.main(["train", "stir", "--config", good, "--out", out]) == cli.EXIT_NUMERIC


def test_cli_train_eval_trace_compare(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TINY)
    out = str(tmp_path / "out")
    assert cli.main(["train", "stir", "--config", cfg, "--out", out]) == 0
    assert cli.main(["eval", "pi_b-F", "--config", cfg, "--out", out, "--episodes", "1"]) == 0
    assert cli.main(["trace", "pi_b-F", "--config", cfg, "--out", out, "--particle", "1",
                     "--steps", "10"]) == 0
    assert cli.main(["compare", out]) == 0
    text = capsys.readouterr().out
    assert "hull area" in text and "stir_reward_mean" in text
    assert len(harness.read_csv(Path(out) / "pi_b-F" / "trace_particle_1.csv")) == 10
