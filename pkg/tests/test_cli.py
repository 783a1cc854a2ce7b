import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dcflow.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK, main
from dcflow.config import ConfigError, bundled_configs, derive_seed, load_config, parse_config, resolve_output_dir
from dcflow.runner import METRICS_CSV, SNAPSHOT, compare_runs, read_metrics_csv, run_experiment


def tiny_raw(scheme="semi_fb", seed=0, **target_params):
    params = {"function": "quadratic", "dim": 2, "alpha": 0.5, **target_params}
    return {
        "name": f"tiny_{scheme}",
        "seed": seed,
        "scheme": scheme,
        "target": {"name": "smooth_dc", "params": params},
        "base": {"name": "normal", "params": {"mean": [0.0, 0.0], "variance": 2.0}},
        "eta": 0.1,
        "outer_iters": 3,
        "jko": {"inner_iters": 8, "batch_size": 64, "learning_rate": [[1, 3, 5e-3]], "hidden_widths": [8]},
        "eval": {"n_samples": 256, "exact_subsample": 64, "metrics": ["free_energy", "kl", "grad_mapping", "w2_to_prev"]},
        "ula": {"enabled": False, "n_chains": 100, "n_iters": 10, "eta": 1e-3},
    }


def write_config(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root, tiny_raw())
    code = main(["run", cfg, "--output-dir", str(root / "out"), "--quiet"])
    return code, root / "out"


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def test_bundled_configs_load_and_mirror_defaults():
    names = bundled_configs()
    assert {"gaussian_mixture_semifb", "gaussian_mixture_fb", "vmf_semifb", "vmf_fb"} <= set(names)
    for name in names:
        load_config(name)
    for name in ["gaussian_mixture_semifb", "gaussian_mixture_fb", "vmf_semifb", "vmf_fb"]:
        cfg = load_config(name)
        assert cfg.eta == 0.1 and cfg.outer_iters == 40
        assert cfg.jko.batch_size == 512
        assert cfg.jko.outer_rate(1) == 5e-3 and cfg.jko.outer_rate(20) == 5e-3
        assert cfg.jko.outer_rate(21) == 2e-3 and cfg.jko.outer_rate(40) == 2e-3
        assert cfg.base["params"]["variance"] == 16.0
        assert (cfg.ula.n_chains, cfg.ula.n_iters, cfg.ula.eta) == (10000, 4000, 1e-3)
    vmf = load_config("vmf_semifb").target["params"]
    assert vmf["kappa"] == 1 and vmf["rho"] == 100 and vmf["center"] == [1.0, 1.5]


def test_config_errors_name_the_field():
    raw = tiny_raw()
    raw["eta"] = -1
    with pytest.raises(ConfigError, match="eta"):
        parse_config(raw)
    raw = tiny_raw()
    del raw["seed"]
    with pytest.raises(ConfigError, match="seed"):
        parse_config(raw)
    raw = tiny_raw()
    raw["jko"]["learning_rate"] = [[1, 2, 5e-3]]
    with pytest.raises(ConfigError, match="jko.learning_rate"):
        parse_config(raw)
    with pytest.raises(ConfigError, match="no bundled config"):
        load_config("nonexistent_config")


def test_overrides_and_output_root(monkeypatch, tmp_path):
    cfg = parse_config(tiny_raw())
    assert cfg.with_overrides(seed=7).seed == 7
    monkeypatch.setenv("DCFLOW_OUTPUT_ROOT", str(tmp_path))
    assert resolve_output_dir(cfg) == tmp_path / "tiny_semi_fb_seed0"
    assert resolve_output_dir(cfg, "/abs/out") == Path("/abs/out")
    assert resolve_output_dir(cfg.with_overrides(output_dir="rel")) == tmp_path / "rel"


def test_derive_seed_is_stable_and_tag_sensitive():
    assert derive_seed(0, "jko") == derive_seed(0, "jko")
    assert derive_seed(0, "jko") != derive_seed(0, "eval")
    assert derive_seed(0, "jko") != derive_seed(1, "jko")


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def test_run_writes_outputs(tiny_run):
    code, out = tiny_run
    assert code == EXIT_OK
    rows = read_metrics_csv(out / METRICS_CSV)
    assert [r["iteration"] for r in rows] == [1, 2, 3]
    with open(out / METRICS_CSV) as fh:
        header = next(csv.reader(fh))
    assert header == ["iteration", "free_energy", "free_energy_se", "kl", "kl_se", "grad_mapping_sq", "w2_to_prev", "wallclock_s"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["status"] == "completed"
    assert manifest["config"]["name"] == "tiny_semi_fb"
    assert (out / SNAPSHOT).is_file() and (out / "samples.csv").is_file()
    lines = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert sum(l["type"] == "iteration" for l in lines) == 3


def test_run_is_bit_reproducible(tiny_run, tmp_path):
    _, out = tiny_run
    cfg = write_config(tmp_path, tiny_raw())
    assert main(["run", cfg, "--output-dir", str(tmp_path / "again"), "--quiet"]) == EXIT_OK
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wallclock_s"} for r in rows]
    assert strip(read_metrics_csv(out / METRICS_CSV)) == strip(read_metrics_csv(tmp_path / "again" / METRICS_CSV))


def test_run_from_manifest_reproduces(tiny_run, tmp_path):
    _, out = tiny_run
    manifest = json.loads((out / "manifest.json").read_text())
    cfg = write_config(tmp_path, manifest["config"])
    assert main(["run", cfg, "--output-dir", str(tmp_path / "m"), "--quiet"]) == EXIT_OK
    a = (out / METRICS_CSV).read_text().splitlines()
    b = (tmp_path / "m" / METRICS_CSV).read_text().splitlines()
    assert [r.rsplit(",", 1)[0] for r in a] == [r.rsplit(",", 1)[0] for r in b]


def test_run_exit_codes(tmp_path, capsys):
    raw = tiny_raw()
    raw["target"]["name"] = "banana"
    assert main(["run", write_config(tmp_path, raw), "--output-dir", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "target" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == EXIT_CONFIG

    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", write_config(tmp_path, tiny_raw()), "--output-dir", str(blocker / "sub"), "--quiet"]) == EXIT_IO


def test_run_divergence_exit_code(tmp_path, capsys):
    raw = tiny_raw("ula", alpha=5e3, function_params={"scale": 1e4})
    raw["target"]["params"]["dim"] = 1
    raw["base"]["params"]["mean"] = [0.0]
    raw["eta"] = 1.0
    raw["ula"] = {"enabled": False, "n_chains": 10, "n_iters": 500, "eta": 1.0}
    raw["eval"]["metrics"] = ["kl"]
    code = main(["run", write_config(tmp_path, raw), "--output-dir", str(tmp_path / "d"), "--quiet"])
    assert code == EXIT_DIVERGED
    assert "divergence" in capsys.readouterr().err
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["status"] == "diverged"


def test_validate(tmp_path, capsys):
    assert main(["validate", "vmf_semifb"]) == EXIT_OK
    assert "ok" in capsys.readouterr().out
    raw = tiny_raw()
    raw["target"]["params"]["function"] = "sextic"
    assert main(["validate", write_config(tmp_path, raw)]) == EXIT_CONFIG


# ---------------------------------------------------------------------------
# dump-samples
# ---------------------------------------------------------------------------


def test_dump_samples(tiny_run, tmp_path):
    _, out = tiny_run
    snap = str(out / SNAPSHOT)
    assert main(["dump-samples", snap, "--n", "0", "--out", str(tmp_path / "e.csv")]) == EXIT_OK
    assert (tmp_path / "e.csv").read_text().splitlines() == ["x0,x1"]
    for name in ["a.csv", "b.csv"]:
        assert main(["dump-samples", snap, "--n", "25", "--seed", "4", "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    data = np.loadtxt(tmp_path / "a.csv", delimiter=",", skiprows=1)
    assert data.shape == (25, 2)
    main(["dump-samples", snap, "--n", "25", "--seed", "5", "--out", str(tmp_path / "c.csv")])
    assert (tmp_path / "a.csv").read_text() != (tmp_path / "c.csv").read_text()


def test_dump_samples_errors(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"garbage")
    assert main(["dump-samples", str(bad), "--n", "3", "--out", str(tmp_path / "o.csv")]) == EXIT_IO
    assert main(["dump-samples", str(tmp_path / "none.npz"), "--n", "3", "--out", str(tmp_path / "o.csv")]) == EXIT_IO


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def test_compare_single_and_paired(tiny_run, tmp_path):
    _, out = tiny_run
    rows = compare_runs([out])
    assert len(rows) == 1 and rows[0]["scheme"] == "semi_fb" and rows[0]["n_runs"] == 1

    fb = run_experiment(parse_config(tiny_raw("fb")), tmp_path / "fb")
    assert fb.status == "completed"
    rows = compare_runs([out, tmp_path / "fb"], tmp_path / "cmp")
    assert [r["scheme"] for r in rows] == ["fb", "semi_fb"]
    assert (tmp_path / "cmp" / "summary.csv").is_file() and (tmp_path / "cmp" / "comparison.csv").is_file()
    assert main(["compare", str(out), str(tmp_path / "fb")]) == EXIT_OK


def test_compare_rejects_mismatched_targets(tiny_run, tmp_path, capsys):
    _, out = tiny_run
    other = run_experiment(parse_config(tiny_raw(alpha=0.7)), tmp_path / "other")
    with pytest.raises(ValueError) as info:
        compare_runs([out, other.output_dir])
    assert str(out) in str(info.value) and str(other.output_dir) in str(info.value)
    assert main(["compare", str(out), str(other.output_dir)]) == EXIT_CONFIG
