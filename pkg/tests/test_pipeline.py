import csv
import json
import warnings

import pytest

from tcbackdoor import attack, evaluation
from tcbackdoor.cli import main
from tcbackdoor.pipeline import (
    ConfigError,
    MissingArtifactError,
    Pipeline,
    RunConfig,
    SeedRun,
    cell_name,
    sub_seed,
    summarize,
)
from tcbackdoor.video import load_dataset

TINY = {
    "gen": {"n_identities": 4, "videos_per_class_train": 8, "videos_per_class_test": 4, "height": 8, "width": 8, "frames": 4},
    "trigger": {"delta_train": 0.07, "period": 2, "delta_test_list": [0.07, 0.3]},
    "attack": {"strategies": ["RPS", "OPS", "OPS_GFS"], "alphas": [0.25, 0.5], "pgd": {"epsilon": 0.01, "steps": 2}},
    "train": {"victim": {"epochs": 1}, "surrogate": {"epochs": 1}, "identity": {"epochs": 1}},
    "seeds": [0, 1],
}


def tiny(**overrides):
    obj = json.loads(json.dumps(TINY))
    obj.update(overrides)
    return RunConfig.from_json(obj)


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    Pipeline(tiny(), out).run()
    return out


def test_grid_rows(finished):
    rows = list(csv.DictReader(open(finished / "results.csv")))
    assert len(rows) == 3 * 2 * 2 * 2  # strategies x alphas x deltas x seeds
    assert tuple(rows[0]) == evaluation.CSV_COLUMNS
    base = list(csv.DictReader(open(finished / "baseline.csv")))
    assert len(base) == 2 * 2 and {r["strategy"] for r in base} == {"CLEAN"}


def test_rerun_is_byte_identical(finished, tmp_path):
    Pipeline(tiny(), tmp_path).run()
    for name in ("results.csv", "baseline.csv", "summary.csv"):
        assert (tmp_path / name).read_bytes() == (finished / name).read_bytes()


def test_cached_stages_reproduce_results(finished):
    before = (finished / "results.csv").read_bytes()
    (finished / "results.csv").unlink()
    Pipeline(tiny(), finished).sweep()
    assert (finished / "results.csv").read_bytes() == before


def test_parallel_jobs_match_serial(finished, tmp_path):
    cfg = tiny(seeds=[1])
    Pipeline(cfg, tmp_path, jobs=2).run()
    ours = (tmp_path / "results.csv").read_text().splitlines()
    serial = [l for l in (finished / "results.csv").read_text().splitlines() if l.endswith(",1")]
    assert ours[1:] == serial


def test_minimal_config_gives_one_row(tmp_path):
    cfg = tiny(attack={"strategies": ["RPS"], "alphas": [0.5]}, trigger={"delta_test_list": [0.3]}, seeds=[0])
    Pipeline(cfg, tmp_path).run()
    assert len((tmp_path / "results.csv").read_text().splitlines()) == 2


def test_poisoned_overlay_matches_library_call(finished):
    run = SeedRun.at(tiny(), 0, finished)
    train = load_dataset(run.path("data", "train.json"))
    for strategy in ("RPS", "OPS"):
        plan = attack.PoisonPlan.load(run.path("plans", f"{cell_name(strategy, 0.5)}.json"))
        direct = attack.apply_plan(plan, train)
        stored = load_dataset(run.path("poisoned", f"{cell_name(strategy, 0.5)}.json"))
        assert all(a.video.tobytes() == b.video.tobytes() and a.label == b.label for a, b in zip(direct, stored))
        # unchanged videos are shared with the clean set, not copied
        written = list(run.path("poisoned", f"{cell_name(strategy, 0.5)}_tensors").iterdir())
        assert len(written) == plan.k


def test_plan_without_surrogate_names_it(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({**TINY, "attack": {"strategies": ["OPS"], "alphas": [0.5]}, "seeds": [0]}))
    out = tmp_path / "out"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert main(["plan", "--config", str(cfg_path), "--out", str(out)]) == 2
    assert "surrogate missing" in capsys.readouterr().err
    with pytest.raises(MissingArtifactError):
        Pipeline(RunConfig.load(cfg_path), out).plan()


def test_report_aggregates_seeds(tmp_path, capsys):
    paths = []
    asrs = [0.2, 0.5, 0.65]
    for seed, a in enumerate(asrs):
        r = evaluation.EvalReport("OPS", 0.4, 0.07, 0.3, 2.0, a, 0.9, 1.0, 1.0, seed)
        paths.append(tmp_path / f"s{seed}.csv")
        evaluation.write_csv([r], paths[-1])
    summary = tmp_path / "summary.csv"
    assert main(["report", *map(str, paths), "--summary", str(summary)]) == 0
    row = next(csv.DictReader(open(summary)))
    mean = sum(asrs) / 3
    std = (sum((a - mean) ** 2 for a in asrs) / 2) ** 0.5
    assert float(row["asr_mean"]) == pytest.approx(mean, abs=1e-10)
    assert float(row["asr_std"]) == pytest.approx(std, abs=1e-10)
    assert row["n_seeds"] == "3"
    assert "OPS" in capsys.readouterr().out


def test_summary_rejects_duplicate_seeds():
    r = evaluation.EvalReport("RPS", 0.4, 0.07, 0.3, 2.0, 0.1, 0.9, 1.0, 1.0, 0)
    with pytest.raises(ValueError):
        summarize([r, r])


def test_sub_seeds_are_stable_and_distinct():
    assert sub_seed(0, "gen") == sub_seed(0, "gen")
    seeds = {sub_seed(m, s) for m in range(3) for s in ("gen", "surrogate", "victim", "identity", "rps")}
    assert len(seeds) == 15
    assert all(0 <= s < 2**32 for s in seeds)


def test_config_roundtrip_and_validation():
    cfg = tiny()
    assert RunConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_json({"gen": {"bogus": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_json({"attack": {"strategies": ["XYZ"]}})
    with pytest.raises(ConfigError):
        RunConfig.from_json({"trigger": {"delta_test_list": [0.7]}})
    assert RunConfig.from_json({"seed": 7}).seeds == (7,)


def test_partial_section_keeps_its_defaults():
    cfg = RunConfig.from_json({"train": {"surrogate": {"epochs": 2}}, "attack": {"pgd": {"steps": 3}}})
    assert cfg.train.surrogate.lr == RunConfig().train.surrogate.lr
    assert cfg.train.surrogate.epochs == 2
    assert cfg.attack.pgd.epsilon == 0.01 and cfg.attack.pgd.steps == 3
    assert cfg.train.identity == RunConfig().train.identity


def test_strong_training_trigger_is_warned_about():
    with pytest.warns(UserWarning, match="delta_train"):
        RunConfig.from_json({"trigger": {"delta_train": 0.2, "delta_test_list": [0.1, 0.3]}})
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        RunConfig()


def test_out_dir_from_another_config_is_refused(finished):
    with pytest.raises(ConfigError):
        Pipeline(tiny(trigger={"delta_test_list": [0.1]}), finished).evaluate()


def test_cli_missing_config(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json")]) == 2
    assert "not found" in capsys.readouterr().err
