import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from channelmodes.cli import (DEFAULT_CONFIG, ConfigError, config_hash,
                              load_config, main, selection_from_config)
from channelmodes.reports import read_csv

SMALL_CONFIG = {
    "flow": {"reynolds": 5000.0, "slip_length": 0.0},
    "cell": {"delta_m": 1.0203, "delta_k": 1.0203},
    "basis": {"octaves": 1, "include_3d": True,
              "roots_1d": 8, "roots_2d": 3, "roots_3d": 2},
    "evolution": {"dt": 0.02, "t_end": 2.0, "cadence": 5,
                  "k_trajectories": 2, "epsilon_sq": 0.01, "seed": 7,
                  "checkpoint_every": 50},
}


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(SMALL_CONFIG))
    return str(path)


def test_config_defaults_and_overrides(config_file):
    cfg = load_config(config_file, {"flow.reynolds": 1234.0})
    assert cfg["flow"]["reynolds"] == 1234.0
    assert cfg["basis"]["octaves"] == 1
    assert cfg["output"]["format"] == "csv"


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("flow: {reynolds: 100, viscosity: 2}\n")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_config_validation():
    with pytest.raises(ConfigError):
        load_config(None, {"flow.reynolds": -5.0})
    with pytest.raises(ConfigError):
        load_config(None, {"output.format": "xml"})


def test_config_hash_stable():
    a = load_config(None)
    b = load_config(None)
    assert config_hash(a) == config_hash(b)
    c = load_config(None, {"flow.reynolds": 9999.0})
    assert config_hash(a) != config_hash(c)


def test_selection_from_octaves():
    cfg = load_config(None)
    cfg["basis"]["octaves"] = 2
    sel = selection_from_config(cfg)
    assert (0, 0) in sel.lattice and (2, 0) in sel.lattice


def test_dispersion_command_values(tmp_path):
    out = tmp_path / "disp"
    rc = main(["dispersion", "--family", "1d-sym", "--ls", "0", "--n", "4",
               "--out", str(out)])
    assert rc == 0
    cols, meta = read_csv(out / "dispersion.csv")
    assert np.allclose(cols["mu"], [1.5707963267948966, 4.71238898038469,
                                    7.853981633974483, 10.995574287564276])
    assert "config_hash" in meta
    assert (out / "dispersion.png").exists()


def test_dispersion_command_antisym_first_root(tmp_path):
    out = tmp_path / "disp"
    rc = main(["dispersion", "--family", "1d-antisym", "--ls", "0",
               "--n", "1", "--out", str(out), "--no-figures"])
    assert rc == 0
    cols, _ = read_csv(out / "dispersion.csv")
    assert cols["mu"][0] == pytest.approx(math.pi, abs=1e-12)
    assert not (out / "dispersion.png").exists()


def test_dispersion_malformed_family_exit_2(tmp_path, capsys):
    rc = main(["dispersion", "--family", "weird", "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "unknown family" in capsys.readouterr().err


def test_config_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("flow: {reynolds: -3}\n")
    rc = main(["basis", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_basis_command(tmp_path, config_file):
    out = tmp_path / "b"
    rc = main(["basis", "--config", config_file, "--out", str(out)])
    assert rc == 0
    doc = json.loads((out / "basis.json").read_text())
    assert doc["n_modes"] == len(doc["modes"])


def test_evolve_resume_bitwise(tmp_path, config_file):
    full = tmp_path / "full"
    rc = main(["evolve", "--config", config_file, "--out", str(full)])
    assert rc == 0
    data_full = np.load(full / "coefficients.npz")

    # re-run, then resume from the midpoint checkpoint
    cp = full / "checkpoints" / "cp_000000050.json"
    resumed = tmp_path / "resumed"
    rc = main(["evolve", "--config", config_file, "--out", str(resumed),
               "--resume", str(cp)])
    assert rc == 0
    data_res = np.load(resumed / "coefficients.npz")
    mask = data_full["t"] >= 1.0 - 1e-12
    assert np.array_equal(data_full["t"][mask], data_res["t"])
    assert np.array_equal(data_full["C"][mask], data_res["C"])


def test_ensemble_determinism_bytes(tmp_path, config_file):
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        rc = main(["ensemble", "--config", config_file, "--out", str(out),
                   "--k-traj", "2", "--seed", "7", "--no-figures"])
        assert rc == 0
        outs.append(out)
    for rel in ("ensemble_mean.csv", "traj_00/series.csv",
                "traj_01/series.csv", "traj_00/ledger.csv",
                "traj_01/force.csv"):
        a = (outs[0] / rel).read_bytes()
        b = (outs[1] / rel).read_bytes()
        assert a == b, rel


def test_diagnose_and_export_field(tmp_path, config_file):
    run = tmp_path / "run"
    assert main(["evolve", "--config", config_file, "--out", str(run)]) == 0
    assert main(["diagnose", "--run", str(run)]) == 0
    cps = sorted((run / "checkpoints").glob("cp_*.json"))
    out = tmp_path / "field"
    rc = main(["export-field", "--basis", str(run / "basis.json"),
               "--checkpoint", str(cps[-1]), "--out", str(out),
               "--nx", "8", "--ny", "3", "--nz", "17"])
    assert rc == 0
    cols, meta = read_csv(out / "field.csv")
    assert len(cols["u_x"]) == 8 * 3 * 17
    assert "basis_checksum" in meta


def test_series_json_format(tmp_path, config_file):
    out = tmp_path / "json_run"
    rc = main(["evolve", "--config", config_file, "--out", str(out),
               "--format", "json", "--no-figures"])
    assert rc == 0
    doc = json.loads((out / "series.json").read_text())
    assert "Q_rel" in doc["series"]
    assert doc["meta"]["config_hash"]


def test_outputs_carry_headers(tmp_path, config_file):
    out = tmp_path / "hdr"
    main(["evolve", "--config", config_file, "--out", str(out)])
    cols, meta = read_csv(out / "series.csv")
    assert meta["tool"].startswith("channelmodes ")
    assert meta["config_hash"]
    assert meta["basis_checksum"]
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["flow"]["reynolds"] == 5000.0


def test_operator_cache_reused(tmp_path, config_file):
    out = tmp_path / "c1"
    main(["evolve", "--config", config_file, "--out", str(out)])
    cache = sorted((out / "cache").glob("*.npz"))
    assert len(cache) == 2  # L and T
    mtimes = {p: p.stat().st_mtime_ns for p in cache}
    out2 = tmp_path / "c2"
    main(["evolve", "--config", config_file, "--out", str(out2),
          "--cache", str(out / "cache")])
    for p in cache:
        assert p.stat().st_mtime_ns == mtimes[p]  # untouched, reused
