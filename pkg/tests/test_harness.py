import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_calib.errors import AggregationError, ConfigurationError
from fewshot_calib.finetune import finetune_episode
from fewshot_calib.harness import (
    ReplayMismatch,
    aggregate,
    build_config,
    execute,
    load_config,
    paired,
    prepare,
    replay,
)
from fewshot_calib.harness.cli import main as cli_main
from fewshot_calib.harness.config import parse_assignments
from fewshot_calib.harness.suite import episode_seed, new_run_dir
from fewshot_calib.classifier import ClassifierHead, compute_prototypes, logits
from fewshot_calib.backbone import forward
from fewshot_calib.episodes import sample_episode

SMALL = {"preset": "skewed", "episodes": 4, "epochs": 4, "pretrain_epochs": 3, "queries": 5, "seed": 0}


@pytest.fixture(scope="module")
def small_cfg():
    return build_config(SMALL)


@pytest.fixture(scope="module")
def workspace(small_cfg):
    return prepare(small_cfg)


# aggregate ---------------------------------------------------------------


@pytest.mark.parametrize(
    "values, mean, ci",
    [
        ([0.5, 0.5, 0.5], 0.5, 0.0),
        ([0.0, 1.0], 0.5, 1.96 * math.sqrt(0.5) / math.sqrt(2)),
        ([1.0, 2.0, 3.0, 4.0], 2.5, 1.96 * math.sqrt(5 / 3) / 2),
    ],
)
def test_aggregate_cases(values, mean, ci):
    agg = aggregate(values)
    assert agg.mean == pytest.approx(mean, abs=1e-15)
    assert agg.ci95 == pytest.approx(ci, rel=1e-12)
    assert agg.n == len(values)


@pytest.mark.parametrize("values", [[], [0.7], [0.1, float("nan")], [float("inf"), 1.0]])
def test_aggregate_rejects(values):
    with pytest.raises(AggregationError):
        aggregate(values)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=2, max_size=30), st.randoms(use_true_random=False))
def test_aggregate_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    a, b = aggregate(values), aggregate(shuffled)
    assert a.mean == pytest.approx(b.mean, abs=1e-15)
    assert a.ci95 == pytest.approx(b.ci95, abs=1e-15)


def test_aggregate_matches_numpy():
    x = np.random.default_rng(0).normal(size=57)
    agg = aggregate(x)
    assert agg.mean == pytest.approx(x.mean(), rel=1e-12)
    assert agg.ci95 == pytest.approx(1.96 * x.std(ddof=1) / np.sqrt(x.size), rel=1e-12)


def test_paired_is_difference_and_checks_length():
    assert paired([0.5, 0.6, 0.7], [0.6, 0.8, 0.7]).mean == pytest.approx(0.1)
    with pytest.raises(AggregationError):
        paired([0.1, 0.2], [0.1])


# config ------------------------------------------------------------------


def test_parse_error_reports_line_number():
    with pytest.raises(ConfigurationError, match=r"cfg:3:"):
        parse_assignments(["# comment", "ways = 5", "lr = fast"], "cfg")


@pytest.mark.parametrize(
    "lines, message",
    [
        (["colour = red"], "unknown config key"),
        (["ways = 5", "ways = 6"], "duplicate key"),
        (["no equals sign"], "expected 'key = value'"),
        (["row = B+XX"], "bad value"),
        (["refit_stats = maybe"], "bad value"),
    ],
)
def test_config_rejects(lines, message):
    with pytest.raises(ConfigurationError, match=message):
        parse_assignments(lines, "cfg")


@pytest.mark.parametrize(
    "overrides",
    [{"queries": 0}, {"episodes": 0}, {"ways": 1}, {"shots": "0"}, {"shot_list": ()}, {"lr": -1.0}, {"workers": 0}],
)
def test_invalid_configs(overrides):
    with pytest.raises(ConfigurationError):
        build_config({}, overrides).validate()


def test_missing_path_rejected():
    with pytest.raises(ConfigurationError, match="does not exist"):
        build_config({}, {"backbone": "/nonexistent/backbone.txt"}).validate()


def test_precedence(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("preset = skewed\nlr = 0.5\nways = 3\n")
    cfg = load_config(path, {"ways": 4})
    assert cfg.shift_offset == 8.0  # from the preset
    assert cfg.lr == 0.5  # file beats preset
    assert cfg.ways == 4  # override beats file


def test_config_text_round_trip():
    cfg = build_config({"preset": "strayed", "rows": ("B", "B+FN"), "shots": "1-5"})
    assert build_config(parse_assignments(cfg.to_text().splitlines())) == cfg


# episodes and rows -------------------------------------------------------


def test_episode_seed_depends_on_both_parts():
    seeds = {episode_seed(g, i) for g in range(3) for i in range(50)}
    assert len(seeds) == 150


def test_row_none_is_prototype_baseline(workspace, small_cfg):
    seed = episode_seed(small_cfg.seed, 0)
    ep = sample_episode(workspace.novel, small_cfg.ways, 5, small_cfg.queries, seed)
    res = finetune_episode(ep, workspace.backbone, small_cfg.finetune_config("none", seed))
    fs, _ = forward(workspace.backbone, ep.support_x)
    fq, _ = forward(workspace.backbone, ep.query_x)
    protos = compute_prototypes(fs, ep.support_y, small_cfg.ways)
    pred = np.argmax(logits(fq, protos, ClassifierHead(small_cfg.temperature)), axis=1)
    assert res.query_accuracy == pytest.approx(np.mean(pred == ep.query_y))


@pytest.fixture(scope="module")
def ablation(workspace, small_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    return execute("ablate", small_cfg, out, workspace), out


def test_rows_share_episodes(ablation, small_cfg):
    result, _ = ablation
    by_episode = {}
    for rec in result.records:
        key = (rec["fingerprint"], tuple(rec["support_index"]), tuple(rec["query_index"]))
        by_episode.setdefault(rec["episode"], set()).add(key)
    assert len(by_episode) == small_cfg.episodes
    assert all(len(v) == 1 for v in by_episode.values())
    assert {r["row"] for r in result.records} == set(small_cfg.rows)


def test_run_artifacts(ablation, small_cfg):
    result, _ = ablation
    files = {p.name for p in result.directory.iterdir()}
    assert {"episodes.jsonl", "summary.json", "config.txt"} <= files
    assert sum(name.startswith("curves_") for name in files) == len(small_cfg.rows)
    summary = json.loads((result.directory / "summary.json").read_text())
    assert set(summary["cells"]) == set(small_cfg.rows)
    assert "workers" not in summary["config"]
    assert len(summary["cells"]["B"]["curves"]) == small_cfg.epochs


def test_determinism(ablation, workspace, small_cfg):
    first, out = ablation
    again = execute("ablate", small_cfg, out, workspace)
    for name in ("episodes.jsonl", "summary.json"):
        assert (first.directory / name).read_bytes() == (again.directory / name).read_bytes()


def test_run_dirs_are_append_only(tmp_path):
    a, b = new_run_dir(tmp_path), new_run_dir(tmp_path)
    assert (a.name, b.name) == ("run-0001", "run-0002")
    (a / "keep.txt").write_text("x")
    assert new_run_dir(tmp_path).name == "run-0003"
    assert (a / "keep.txt").read_text() == "x"


def test_replay_accepts_untouched_run(ablation):
    result, _ = ablation
    assert replay(result.directory)["cells"] == result.summary["cells"]


def _copy_run(src, dst):
    dst.mkdir()
    for p in src.iterdir():
        (dst / p.name).write_bytes(p.read_bytes())
    return dst


def test_replay_names_tampered_field(ablation, tmp_path):
    result, _ = ablation
    run = _copy_run(result.directory, tmp_path / "run-9999")
    lines = (run / "episodes.jsonl").read_text().splitlines()
    rec = json.loads(lines[2])
    rec["query_accuracy"] = 1.0 - rec["query_accuracy"] / 2
    lines[2] = json.dumps(rec, separators=(",", ":"))
    (run / "episodes.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(ReplayMismatch) as info:
        replay(run)
    assert info.value.field.startswith(f"cells.{rec['cell']}")
    assert cli_main(["replay", str(run)]) == 1


def test_replay_detects_edited_curve_file(ablation, tmp_path):
    result, _ = ablation
    run = _copy_run(result.directory, tmp_path / "run-9998")
    curve = sorted(run.glob("curves_*.csv"))[0]
    curve.write_text(curve.read_text().replace("1,", "2,", 1))
    with pytest.raises(ReplayMismatch) as info:
        replay(run)
    assert info.value.field == curve.name


def test_workers_do_not_change_results(workspace, small_cfg, tmp_path):
    one = execute("ablate", small_cfg, tmp_path, workspace)
    two = execute("ablate", small_cfg.replace(workers=2), tmp_path, workspace)
    for name in ("episodes.jsonl", "summary.json"):
        assert (one.directory / name).read_bytes() == (two.directory / name).read_bytes()


def test_shot_sweep_cells(workspace, small_cfg):
    result = execute("shots", small_cfg.replace(shot_list=(1, 3)), None, workspace)
    assert set(result.summary["cells"]) == {f"{k}shot/{r}" for k in (1, 3) for r in ("none", "B", small_cfg.row)}
    assert {"1shot gain over B", "3shot gain over B"} <= set(result.summary["comparisons"])


# cli ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "argv",
    [
        ["ablate", "--seed", "0"],  # missing --out
        ["run", "--out", "x"],  # missing --seed
        ["explode", "--out", "x"],
        [],
    ],
)
def test_cli_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as info:
        cli_main(argv)
    assert info.value.code == 2


def test_cli_config_error_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("ways = 5\nqueries = 0\n")
    assert cli_main(["run", "--config", str(cfg), "--out", str(tmp_path), "--seed", "0"]) == 2
    assert cli_main(["run", "--out", str(tmp_path), "--seed", "0", "--set", "shots=1", "--set", "queries=0"]) == 2
    assert "queries" in capsys.readouterr().err


def test_cli_replay_of_missing_dir_is_usage_error(tmp_path, capsys):
    assert cli_main(["replay", str(tmp_path / "nothing")]) == 2


def test_cli_help_mentions_mandatory_flags(capsys):
    with pytest.raises(SystemExit) as info:
        cli_main(["ablate", "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    assert "--out" in text and "(required)" in text


def test_cli_run_writes_artifacts(tmp_path, capsys):
    code = cli_main(["run", "--out", str(tmp_path), "--seed", "1", "--preset", "skewed", "--episodes", "2",
                     "--set", "epochs=2", "--set", "pretrain_epochs=2", "--set", "row=B+FN"])
    assert code == 0
    run = tmp_path / "run-0001"
    assert (run / "summary.json").exists()
    assert "acc" in capsys.readouterr().out
    assert cli_main(["replay", str(run)]) == 0


def test_support_loss_falls_on_clean_benchmark():
    # measured contract: 600 seeded episodes of the full method
    result = execute("run", build_config({"preset": "clean", "episodes": 600}))
    falls = [r["traces"][-1]["support_loss"] < r["traces"][0]["support_loss"] for r in result.records]
    assert all(r["status"] == "ok" for r in result.records)
    assert np.mean(falls) >= 0.95
