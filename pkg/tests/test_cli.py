import csv
import json

import pytest

from propcredit.cli import ConfigError, default_config, main, resolve_config

FAST = {"pretrain": {"steps": 30, "batch": 64}}


def _cfg(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps({"version": 1, **doc}))
    return str(path)


def _rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_print_config_lists_defaults(capsys):
    assert main(["audit-schedule", "--print-config"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["version"] == 1 and doc["schedule"]["K"] == 50


def test_unknown_key_and_version_are_config_errors(tmp_path):
    assert main(["audit-flow", "--config", _cfg(tmp_path, {"flow": {"bogus": 1}})]) == 2
    bad = tmp_path / "v.json"
    bad.write_text(json.dumps({"version": 99}))
    assert main(["audit-flow", "--config", str(bad)]) == 2
    assert main(["audit-flow", "--config", str(tmp_path / "missing.json")]) == 2
    with pytest.raises(ConfigError):
        resolve_config("compare", {"version": 1, "variants": [{"method": "pcpo-full", "colour": 1}]})


def test_audit_schedule_default(tmp_path):
    out = tmp_path / "new" / "dir"
    assert main(["audit-schedule", "--out", str(out)]) == 0
    rows = _rows(out / "schedule_audit.csv")
    assert len(rows) == 50
    assert list(rows[0]) == ["step_index", "t", "alpha_bar", "sigma", "C", "w", "sigma_tilde", "w_tilde"]
    summary = json.loads((out / "schedule_summary.json").read_text())
    assert {"w_star", "sum_w", "sum_w_tilde"} <= set(summary)
    assert (out / "schedule_weights.svg").exists()


def test_audit_schedule_w_star_override(tmp_path):
    out = tmp_path / "o"
    assert main(["audit-schedule", "--config", _cfg(tmp_path, {"schedule": {"w_star": 6.0}}), "--out", str(out)]) == 0
    rows = _rows(out / "schedule_audit.csv")
    assert all(abs(float(r["w_tilde"]) - 6.0) <= 1e-9 for r in rows)


def test_infeasible_w_star_is_numerical_failure(tmp_path):
    cfg = _cfg(tmp_path, {"schedule": {"w_star": 0.5}})
    assert main(["audit-schedule", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


@pytest.mark.parametrize("preset, n", [("dancegrpo", 16), ("flowgrpo", 10)])
def test_audit_flow_presets(tmp_path, preset, n):
    out = tmp_path / preset
    assert main(["audit-flow", "--config", _cfg(tmp_path, {"flow": {"preset": preset}}), "--out", str(out)]) == 0
    assert len(_rows(out / "flow_audit.csv")) == n
    summary = json.loads((out / "flow_summary.json").read_text())
    assert (summary["t_one_approximation"] is not None) == (preset == "flowgrpo")


def test_audit_flow_unit_shift_has_uniform_dt(tmp_path):
    out = tmp_path / "o"
    assert main(["audit-flow", "--config", _cfg(tmp_path, {"flow": {"shift": 1.0}}), "--out", str(out)]) == 0
    dts = {round(float(r["dt"]), 12) for r in _rows(out / "flow_audit.csv")}
    assert dts == {round(1 / 16, 12)}


def test_compare_single_variant_single_seed(tmp_path):
    doc = {**FAST, "variants": [{"method": "pcpo-full", "K": 5}], "seeds": [0], "epochs": 2}
    out = tmp_path / "o"
    assert main(["compare", "--config", _cfg(tmp_path, doc), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert list(summary["variants"]) == ["pcpo-full"]
    assert len(summary["variants"]["pcpo-full"]["seeds"]) == 1
    assert len(_rows(out / "metrics.csv")) == 2


def test_irg_sweep_identity(tmp_path):
    doc = {**FAST, "variant": {"K": 5}, "epochs": 1, "models": [{"reward": "mode"}],
           "lambdas": [0.0, 0.5, 1.0], "n_samples": 16}
    out = tmp_path / "o"
    assert main(["irg", "--config", _cfg(tmp_path, doc), "--out", str(out)]) == 0
    summary = json.loads((out / "irg_summary.json").read_text())
    assert [s["lambda"] for s in summary["sweep"]] == [[0.0], [0.5], [1.0]]
    for i in range(3):
        assert len(_rows(out / f"samples_{i}.csv")) == 16


def test_rerun_from_manifest_is_byte_identical(tmp_path):
    doc = {**FAST, "variant": {"method": "eps-matching", "K": 5}, "epochs": 2}
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["finetune", "--config", _cfg(tmp_path, doc), "--out", str(a)]) == 0
    assert main(["finetune", "--config", str(a / "run_manifest.json"), "--out", str(b)]) == 0
    for name in ("metrics.csv", "summary.json", "checkpoint.json", "run_manifest.json", "reward.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    manifest = json.loads((a / "run_manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["code_version"]


def test_manifest_for_another_command_is_rejected(tmp_path):
    assert main(["audit-flow", "--out", str(tmp_path / "a")]) == 0
    assert main(["audit-schedule", "--config", str(tmp_path / "a" / "run_manifest.json")]) == 2


def test_default_config_has_every_command():
    for cmd in ("audit-schedule", "audit-flow", "pretrain", "finetune", "compare", "irg"):
        assert default_config(cmd)["command"] == cmd


def test_pretrain_command(tmp_path):
    out = tmp_path / "o"
    doc = {**FAST, "eval_samples": 32}
    assert main(["pretrain", "--config", _cfg(tmp_path, doc), "--out", str(out)]) == 0
    assert (out / "checkpoint.json").exists()
    assert 0.0 <= json.loads((out / "pretrain_summary.json").read_text())["coverage"] <= 1.0
