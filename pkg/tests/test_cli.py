import json

import pytest
import yaml

from condflow import InvalidArgumentError, list_registry
from condflow.cli import UsageError, load_config, main, resolve_params, run
from condflow.registry import get_experiment, get_functional


def small_config(**overrides):
    cfg = {"experiment": "ito-telescoping", "seed": 11, "n": 16, "N": 32, "M": 3}
    cfg.update(overrides)
    return cfg


def test_registry_contains_expected_names():
    names = list_registry()
    assert "mean-squared" in names
    assert "lq-common-noise" in names
    assert names == sorted(names)
    assert names == list_registry()  # stable across calls


def test_registry_rejects_unknown_names():
    with pytest.raises(InvalidArgumentError):
        get_functional("no-such-functional")
    with pytest.raises(InvalidArgumentError):
        get_experiment("no-such-experiment")


def test_resolve_rejects_unknown_keys():
    with pytest.raises(UsageError):
        resolve_params(small_config(banana=1))
    with pytest.raises(UsageError):
        resolve_params(small_config(tolerance={"weird": 2}))
    with pytest.raises(UsageError):
        resolve_params(small_config(coefficients={"zeta": 2}))
    with pytest.raises(UsageError):
        resolve_params({"experiment": "ito-telescoping"})  # missing seed
    with pytest.raises(UsageError):
        resolve_params({"seed": 3})  # missing experiment


def test_resolve_applies_overrides():
    name, seed, params, extras = resolve_params(
        small_config(coefficients={"sigma0": 2.0}, tolerance={"tol_exact": 1e-9})
    )
    assert name == "ito-telescoping"
    assert seed == 11
    assert params["n"] == 16 and params["N"] == 32 and params["M"] == 3
    assert params["sigma0"] == 2.0
    assert params["tol_exact"] == 1e-9


def test_run_writes_files_and_passes(tmp_path):
    code, payloads = run(small_config(), out_dir=tmp_path)
    assert code == 0
    for fname in ("report.json", "terms.csv", "manifest.json"):
        assert (tmp_path / fname).exists()
        assert (tmp_path / fname).read_text() == payloads[fname]
    manifest = json.loads(payloads["manifest.json"])
    assert manifest["passed"] is True
    assert manifest["streams"]["root"] == [11, 0]


def test_run_is_byte_deterministic(tmp_path):
    _, first = run(small_config(), write=False)
    _, second = run(small_config(), write=False)
    assert first == second


def test_manifest_replay_reproduces_payloads(tmp_path):
    code, payloads = run(small_config(), out_dir=tmp_path)
    assert code == 0
    replayed = load_config(tmp_path / "manifest.json")
    code2, payloads2 = run(replayed, write=False)
    assert code2 == 0
    assert payloads2["report.json"] == payloads["report.json"]
    assert payloads2["terms.csv"] == payloads["terms.csv"]


def test_failing_tolerance_still_writes_report(tmp_path):
    # C = 0 makes the statistical budget collapse; the mean absolute
    # residual of a noisy instance cannot beat 3 SE alone
    cfg = {
        "experiment": "ito-second-moment",
        "seed": 5,
        "n": 64,
        "N": 64,
        "M": 16,
        "tolerance": {"C": 0.0},
    }
    code, payloads = run(cfg, out_dir=tmp_path)
    assert code == 1
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["passed"] is False
    assert (tmp_path / "terms.csv").exists()


def test_sweep_through_run(tmp_path):
    cfg = small_config(grid={"n": [8, 32]})
    code, payloads = run(cfg, out_dir=tmp_path)
    assert code == 0
    lines = payloads["sweep.csv"].strip().splitlines()
    assert lines[0].startswith("n,N,M,mean_abs_residual")
    assert len(lines) == 3


def test_cli_main_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(small_config(out=str(tmp_path / "out"))))
    assert main(["verify-ito", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "out" / "report.json").exists()

    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(small_config(nonsense=1)))
    assert main(["verify-ito", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "nonsense" in err

    # subcommand/experiment family mismatch is a usage error
    wrong = tmp_path / "wrong.yaml"
    wrong.write_text(yaml.safe_dump(small_config()))
    assert main(["verify-wentzell", "--config", str(wrong)]) == 2


def test_cli_seed_override(tmp_path):
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump({"experiment": "ito-telescoping", "n": 8, "N": 16, "M": 2}))
    # no seed anywhere -> usage error
    assert main(["verify-ito", "--config", str(cfg_path)]) == 2
    assert main(["verify-ito", "--config", str(cfg_path), "--seed", "3", "--out", str(tmp_path / "o")]) == 0


def test_cli_list(capsys):
    assert main(["list"]) == 0
    out = capsys.readouterr().out.split()
    assert "mean-squared" in out
    assert "lq-common-noise" in out


def test_cli_default_experiment_requires_seed(tmp_path):
    assert main(["verify-ito", "--out", str(tmp_path)]) == 2
    assert main(["deriv-check", "--seed", "9", "--out", str(tmp_path / "d")]) == 0
