import csv
import hashlib
import json
import warnings
from pathlib import Path

import pytest

from wiclosure.cli import main
from wiclosure.sim_io import ScenarioConfig

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
NOISE_FREE = SCENARIOS / "crossing_noise_free.json"

ARTIFACTS = ["scenario/config.json", "scenario/measurements.json", "scenario/truth_alpha.tum",
             "scenario/odometry_beta.tum", "solved_alpha.tum", "solved_beta.tum",
             "realization.json", "clusters.csv", "candidates.csv", "report.json",
             "timings.json", "plots/trajectories.csv", "plots/clusters.csv",
             "plots/gated_pairs.csv"]


def run(*argv):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def noise_free_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("nf")
    assert run("run", "--config", NOISE_FREE, "--out", out) == 0
    return out


def test_run_writes_every_artifact(noise_free_run):
    for name in ARTIFACTS:
        assert (noise_free_run / name).is_file(), name
    report = json.loads((noise_free_run / "report.json").read_text())
    assert report["miss_rate"] == 0.0 and report["gated_pairs"] > 0
    assert "timings" not in report


def test_rerun_is_byte_identical(noise_free_run, tmp_path):
    assert run("run", "--config", NOISE_FREE, "--out", tmp_path) == 0
    for name in ARTIFACTS:
        if name != "timings.json":
            assert (tmp_path / name).read_bytes() == (noise_free_run / name).read_bytes(), name


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_inputs_are_not_modified(tmp_path):
    before = digest(NOISE_FREE)
    run("run", "--config", NOISE_FREE, "--out", tmp_path, "--stages", "simulate,solve")
    assert digest(NOISE_FREE) == before


def test_stage_subset_persists_its_outputs(tmp_path):
    assert run("run", "--config", NOISE_FREE, "--out", tmp_path,
               "--stages", "simulate,solve") == 0
    assert (tmp_path / "scenario" / "config.json").is_file()
    assert (tmp_path / "solved_alpha.tum").is_file()
    assert not (tmp_path / "report.json").exists()
    assert not (tmp_path / "candidates.csv").exists()


def test_stage_list_must_be_a_prefix(tmp_path):
    assert run("run", "--config", NOISE_FREE, "--stages", "simulate,gate") == 2


def test_bad_config_exits_2(tmp_path):
    data = json.loads(NOISE_FREE.read_text())
    path = tmp_path / "unknown.json"
    path.write_text(json.dumps({**data, "bogus": 1}))
    assert run("run", "--config", path) == 2
    path.write_text(json.dumps({**data, "d_threshold": -1}))
    assert run("run", "--config", path) == 2
    assert run("run", "--config", tmp_path / "missing.json") == 2


def test_inspect_artifacts(noise_free_run, capsys):
    for name in ("report.json", "solved_beta.tum", "candidates.csv", "clusters.csv"):
        assert run("inspect", noise_free_run / name) == 0
    out = capsys.readouterr().out
    assert "gated pairs" in out and "poses" in out
    assert run("inspect", noise_free_run / "nope.json") == 2


def test_bench_writes_timing_table(tmp_path):
    out = tmp_path / "bench.csv"
    assert run("bench", "--config", SCENARIOS / "hardware.json", "--repeats", "3",
               "--out", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert rows[-1]["stage"] == "total"
    assert {r["stage"] for r in rows} >= {"simulate", "solve", "pcm", "gate", "total"}
    assert run("bench", "--config", SCENARIOS / "hardware.json", "--repeats", "2") == 2


def test_scenario_without_links_gives_zero_counts(tmp_path):
    cfg = ScenarioConfig(seed=1, trajectories=[{"waypoints": [[0, 0], [100, 0]]},
                                               {"waypoints": [[0, 500], [100, 500]]}],
                         step=1.0, comm_interval=10.0, comm_range=50.0)
    cfg.save(tmp_path / "far.json")
    assert run("run", "--config", tmp_path / "far.json", "--out", tmp_path / "out") == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["gated_pairs"] == report["pair_evaluations"] == report["true_positives"] == 0
    assert report["ate"] is None
    assert (tmp_path / "out" / "candidates.csv").read_text() == \
        "p_index,k_index,d_mh,route_link\n"


def test_large_city_evaluates_few_pairs(tmp_path):
    assert run("run", "--config", SCENARIOS / "city_2x2000.json", "--out", tmp_path) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["pair_evaluations"] < 0.15 * report["total_pairs"]
