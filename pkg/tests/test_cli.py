import json

import numpy as np
import pandas as pd
import pytest

from funvar import cli
from funvar import density_panel as dp
from ingest_fixtures import clean_firm

SMALL = {
    "simulate": {"T": 40, "n_obs": 200, "seed": 3},
    "grid": {"points_per_dim": [8, 8], "bounds_per_dim": [[-2.2, 2.2], [-2.2, 2.2]]},
    "factor": {"method": "flat", "ranks": [3], "restarts": 2},
    "gibbs": {"iterations": 60, "burn": 20, "seed": 1},
    "hmax": 8,
    "horizons": [1, 4, 8],
}


def write_config(directory, **over):
    cfg = cli._merge(SMALL, over)
    cfg.setdefault("output_dir", "run")
    path = directory / "run.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["irf", "-c", str(write_config(d))]) == 0
    return d / "run"


def test_full_pipeline_outputs(small_run):
    for name in ("simulate", "densities", "factorize", "fit", "irf"):
        assert (small_run / f"{name}_manifest.json").is_file()
    assert len(list((small_run / "densities").glob("clr_t*.csv"))) == 40
    firf = small_run / "irf" / "firf"
    grid = dp.GridSpec((8, 8), ((-2.2, 2.2), (-2.2, 2.2)))
    for h in (1, 4, 8):
        for q in ("q0.15", "q0.5", "q0.85"):
            fld = dp.read_field_csv(firf / f"firf_h{h:03d}_{q}.csv", grid)
            assert fld.values.shape == (8, 8)
    irf = pd.read_csv(small_run / "irf" / "irf.csv")
    assert set(irf["quantile"]) == {0.05, 0.5, 0.95}
    assert irf["horizon"].max() == 8
    man = json.loads((small_run / "irf_manifest.json").read_text())
    assert float(man["firf_max_abs_integral"]) < 1e-8 and "n_explosive" in man
    assert not (small_run / ".funvar.lock").exists()


def test_manifests_have_no_absolute_paths(small_run):
    for path in small_run.glob("*_manifest.json"):
        man = json.loads(path.read_text())
        assert all(not k.startswith("/") for k in man["inputs"])
        assert len(man["config_hash"]) == 64


def test_invalid_config_lists_every_problem(tmp_path, capsys):
    cfg = write_config(tmp_path, p=0, gibbs={"burn": 100, "iterations": 50}, horizons=[30], colour="red")
    assert cli.main(["fit", "-c", str(cfg)]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    for text in ("p must be", "gibbs.burn", "horizons", "unknown config key 'colour'"):
        assert text in err
    assert not (tmp_path / "run").exists()


def test_bad_json_and_missing_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["fit", "-c", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["fit", "-c", str(tmp_path / "nope.json")]) == cli.EXIT_IO


def test_missing_input_paths_are_config_errors(tmp_path):
    cfg = write_config(tmp_path, source="ingest", paths={"micro_csv": "absent.csv"})
    problems = cli.validate(cli.load_config(cfg), "fit")
    assert any("micro_csv" in p for p in problems) and any("macro_csv" in p for p in problems)


def test_locked_run_directory_exits_with_io_code(tmp_path):
    cfg = write_config(tmp_path)
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / ".funvar.lock").write_text("1")
    assert cli.main(["simulate", "-c", str(cfg)]) == cli.EXIT_IO


def test_mixed_frequency_run_records_observed_periods(tmp_path):
    cfg = write_config(tmp_path, m=4, gibbs={"iterations": 30, "burn": 10})
    assert cli.main(["fit", "-c", str(cfg)]) == 0
    man = json.loads((tmp_path / "run" / "fit_manifest.json").read_text())
    assert man["m"] == 4
    assert man["observed_periods"] == list(range(4, 41, 4))


def test_fit_resumes_a_shorter_chain(tmp_path):
    cfg = write_config(tmp_path, gibbs={"iterations": 30, "burn": 10})
    assert cli.main(["fit", "-c", str(cfg)]) == 0
    cfg = write_config(tmp_path, gibbs={"iterations": 60, "burn": 10})
    assert cli.main(["fit", "-c", str(cfg)]) == 0
    resumed = (tmp_path / "run" / "fit" / "Sigma.csv").read_bytes()
    fresh = tmp_path / "fresh"
    fresh.mkdir()
    assert cli.main(["fit", "-c", str(write_config(fresh, gibbs={"iterations": 60, "burn": 10}))]) == 0
    assert (fresh / "run" / "fit" / "Sigma.csv").read_bytes() == resumed


def test_output_dir_override_and_defaults(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["simulate", "-c", str(cfg), "-o", str(tmp_path / "elsewhere")]) == 0
    assert (tmp_path / "elsewhere" / "data" / "macro.csv").is_file()
    assert cli.main(["defaults"]) == 0
    assert json.loads(capsys.readouterr().out)["gibbs"]["iterations"] == 2000


def test_ingest_source_pipeline(tmp_path):
    rng = np.random.default_rng(0)
    firms = [clean_firm(f"f{i}", np.arange(60), rng=rng) for i in range(30)]
    firms.append(clean_firm("bank", np.arange(60), sic=6100, rng=rng))
    pd.concat(firms).to_csv(tmp_path / "firms.csv", index=False)
    t = np.arange(60)
    pd.DataFrame({"period": t, "gdp": np.exp(0.01 * t + 0.01 * rng.standard_normal(60))}).to_csv(
        tmp_path / "macro.csv", index=False)
    cfg = write_config(tmp_path, source="ingest", paths={"micro_csv": "firms.csv", "macro_csv": "macro.csv"},
                       macro={"detrend": ["gdp"]},
                       grid={"points_per_dim": [6, 6], "bounds_per_dim": [[-0.03, 0.03], [-0.03, 0.03]]},
                       factor={"ranks": [2]})
    assert cli.main(["irf", "-c", str(cfg)]) == 0
    run = tmp_path / "run"
    report = json.loads((run / "data" / "cleaning_report.json").read_text())
    assert report["excluded"]["sector"] == 60
    assert len(list((run / "densities").glob("clr_t*.csv"))) == 60
    irf = pd.read_csv(run / "irf" / "irf.csv")
    assert set(irf["variable"]) == {"gdp", "f1", "f2"}
