import csv
import json
import math

import numpy as np
import pytest

from dichotomy_lab import cli
from dichotomy_lab.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, dumps, main


def write_config(tmp_path, system, numerics=None, **extra):
    cfg = {"system": system, **extra}
    if numerics:
        cfg["numerics"] = numerics
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


STABLE = {"name": "stable", "dim": 1, "delays": [0.0, 1.0],
          "limit_plus": [[[-1.0]], [[0.0]]], "limit_minus": [[[-1.0]], [[0.0]]]}
SADDLE = {"name": "saddle", "dim": 2, "delays": [0.0, 1.0],
          "limit_plus": [[[-1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]]],
          "limit_minus": [[[-1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]]]}
FAST = {"m": 32, "probes": 32}


def error_payload(capsys):
    return json.loads(capsys.readouterr().err)


def read_json(path):
    return json.loads(path.read_text())


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == "dichotomy-lab 0.1.0 (report schema 1)"


def test_shipped_configs_listed():
    assert {"stable_scalar", "saddle", "delayed_scalar", "perturbed_scalar",
            "critical_delay"} <= set(cli.shipped_configs())


def test_spectrum_reports_axis_root(tmp_path):
    assert main(["--config", "critical_delay", "--out", str(tmp_path)]) == EXIT_OK
    res = read_json(tmp_path / "spectrum.json")
    assert res["command"] == "spectrum"
    plus = res["result"]["plus"]
    assert plus["hyperbolic"] is False
    assert plus["axis_root"] == pytest.approx(math.pi / 2, abs=1e-6)


# ---------------------------------------------------------------------------
# error handling
# ---------------------------------------------------------------------------

def test_unknown_key_is_config_error(tmp_path, capsys):
    path = write_config(tmp_path, STABLE, {"stepp": 0.1})
    assert main(["spectrum", "--config", path, "--out", str(tmp_path)]) == EXIT_CONFIG
    err = error_payload(capsys)
    assert err["exit_code"] == EXIT_CONFIG and err["path"] == "numerics.stepp"


def test_bad_delays_is_config_error(tmp_path, capsys):
    path = write_config(tmp_path, {**STABLE, "delays": [0.5, 1.0]})
    assert main(["spectrum", "--config", path, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert error_payload(capsys)["path"] == "system.delays"


def test_missing_field_is_config_error(tmp_path, capsys):
    system = {k: v for k, v in STABLE.items() if k != "limit_minus"}
    path = write_config(tmp_path, system)
    assert main(["spectrum", "--config", path, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert error_payload(capsys)["path"] == "system.limit_minus"


def test_unparsable_file_is_config_error(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["spectrum", "--config", str(path)]) == EXIT_CONFIG
    assert error_payload(capsys)["path"] == "<file>"


def test_missing_command_is_config_error(tmp_path, capsys):
    path = write_config(tmp_path, STABLE)
    assert main(["--config", path, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert error_payload(capsys)["path"] == "command"


def test_numerical_failure_exits_three(tmp_path, capsys):
    path = write_config(tmp_path, STABLE, {"horizon": 2.0, **FAST})
    assert main(["dichotomy", "--config", path, "--out", str(tmp_path)]) == EXIT_NUMERIC
    err = error_payload(capsys)
    assert err["error"] == "DomainError"
    assert read_json(tmp_path / "error.json") == err


def test_unwritable_output_exits_four(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    path = write_config(tmp_path, STABLE)
    assert main(["spectrum", "--config", path, "--out", str(blocker / "sub")]) == EXIT_IO
    assert error_payload(capsys)["error"] == "OutputError"


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def test_json_encoding_round_trips_floats():
    vals = [0.1, 1 / 3, 2.0 ** -40, 1e300]
    text = dumps({"x": vals, "bad": [float("nan"), float("inf")], "n": np.int64(3)})
    back = json.loads(text)
    assert back["x"] == vals
    assert back["bad"] == [None, None] and back["n"] == 3


def read_decay(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_empty_slice_list_gives_header_only(tmp_path):
    path = write_config(tmp_path, STABLE, {"s_list": [], **FAST})
    assert main(["dichotomy", "--config", path, "--out", str(tmp_path)]) == EXIT_OK
    assert read_decay(tmp_path / "decay.csv") == [["ts", "norm", "envelope", "component"]]


def test_saddle_decay_csv(tmp_path):
    path = write_config(tmp_path, SADDLE, FAST)
    assert main(["dichotomy", "--config", path, "--out", str(tmp_path)]) == EXIT_OK
    rows = read_decay(tmp_path / "decay.csv")
    assert rows[0] == ["ts", "norm", "envelope", "component"]
    comps = {r[3] for r in rows[1:]}
    assert comps == {"P", "Q"}
    sl = read_json(tmp_path / "dichotomy.json")["result"]["slices"][0]
    assert sl["rank_Q"] == 1
    for comp, fit in (("P", sl["forward_fit"]), ("Q", sl["backward_fit"])):
        body = np.array([[float(x) for x in r[:3]] for r in rows[1:] if r[3] == comp])
        np.testing.assert_allclose(body[:, 2], fit["D"] * np.exp(-fit["lambda"] * body[:, 0]),
                                   rtol=1e-12)
        assert 0.9 <= fit["lambda"] <= 1.1


def test_csv_can_be_disabled(tmp_path):
    path = write_config(tmp_path, STABLE, FAST, output={"csv": False})
    assert main(["dichotomy", "--config", path, "--out", str(tmp_path)]) == EXIT_OK
    assert not (tmp_path / "decay.csv").exists()
    assert read_json(tmp_path / "dichotomy.json")["result"]["verdict"] == "dichotomy"


def test_solve_writes_trajectory(tmp_path):
    path = write_config(tmp_path, STABLE, {"horizon": 12.0},
                        initial={"value": [1.0]})
    assert main(["solve", "--config", path, "--out", str(tmp_path)]) == EXIT_OK
    with open(tmp_path / "solve.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x1"]
    t, x = np.array([[float(v) for v in r] for r in rows[1:]]).T
    np.testing.assert_allclose(x, np.exp(-t), atol=1e-8)


def test_seed_override_recorded(tmp_path):
    path = write_config(tmp_path, STABLE)
    assert main(["spectrum", "--config", path, "--out", str(tmp_path), "--seed", "7"]) == EXIT_OK
    assert read_json(tmp_path / "spectrum.json")["numerics"]["seed"] == 7
