import json
from pathlib import Path

import numpy as np
import pytest

from vpblab.cli import main
from vpblab.config import (ConfigError, ExperimentConfig, echo, parse_config,
                           validate, write_default_config)


def write(tmp_path, text):
    p = tmp_path / "cfg.ini"
    p.write_text(text)
    return p


def test_minimal_file_fills_defaults(tmp_path):
    p = write(tmp_path, "[kernel]\ngamma = -1.5\n")
    cfg = parse_config(p)
    assert cfg.gamma == -1.5
    assert cfg.n == 16 and cfg.R == 6.0          # defaults
    # echo renders every known key and round-trips
    text = echo(cfg)
    p2 = write(tmp_path, text)
    assert parse_config(p2) == cfg


def test_default_config_is_valid(tmp_path):
    p = tmp_path / "default.ini"
    write_default_config(p)
    cfg = parse_config(p)
    assert validate(cfg) == []


def test_theta_constraint_rejected(tmp_path):
    p = write(tmp_path, "[weight]\ntheta = 0.3\n")
    with pytest.raises(ConfigError, match=r"theta must lie in \(0, 1/4\]"):
        parse_config(p)


def test_very_soft_gamma_accepted_with_warning(tmp_path):
    p = write(tmp_path, "[kernel]\ngamma = -2.5\n")
    cfg = parse_config(p)          # valid per config; kernel warns on use
    from vpblab.collision import KernelConfig
    with pytest.warns(UserWarning, match="guaranteed range"):
        KernelConfig(gamma=cfg.gamma)


def test_unknown_keys_rejected_in_strict_mode(tmp_path):
    p = write(tmp_path, "[kernel]\ngamm = -1.0\n\n[mystery]\nx = 1\n")
    with pytest.raises(ConfigError) as exc:
        parse_config(p)
    msg = str(exc.value)
    assert "unknown key kernel.gamm" in msg
    assert "unknown section [mystery]" in msg
    cfg = parse_config(p, strict=False)
    assert cfg.gamma == -1.0                      # typo ignored non-strictly


def test_all_violations_reported_together(tmp_path):
    p = write(tmp_path,
              "[kernel]\ngamma = 0.5\nn_omega = 7\n\n[weight]\ntheta = 0.9\n")
    with pytest.raises(ConfigError) as exc:
        parse_config(p)
    assert len(exc.value.problems) >= 3


def test_shipped_reference_configs_parse():
    root = Path(__file__).resolve().parent.parent / "configs"
    for name in ("default.ini", "decay.ini", "nonlinear.ini"):
        cfg = parse_config(root / name)
        assert validate(cfg) == []


SMALL = """
[kernel]
gamma = -1.0
R = 4.5
n = 6
n_omega = 8
gain_interp = linear
clip_tolerance = 0.3

[modal]
k_min = 0.2
k_max = 2.0
k_count = 4
T = 4.0
fit_lo = 1.0
fit_hi = 4.0

[nonlinear]
n_x = 8
T_nl = 1.0

[output]
output_dir = {out}
cache_dir = {cache}
threads = 1
"""


def test_cli_assemble_kernel_cache_hit(tmp_path, capsys):
    p = write(tmp_path, SMALL.format(out=tmp_path / "o", cache=tmp_path / "c"))
    assert main(["--config", str(p), "assemble-kernel"]) == 0
    first = json.loads("{" + capsys.readouterr().out.split("{", 1)[1])
    assert first["cache_hit"] is False
    assert main(["--config", str(p), "assemble-kernel"]) == 0
    second = json.loads("{" + capsys.readouterr().out.split("{", 1)[1])
    assert second["cache_hit"] is True
    assert second["config_hash"] == first["config_hash"]


def test_cli_decay_outputs_and_determinism(tmp_path, capsys):
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    cache = tmp_path / "c"
    p1 = write(tmp_path, SMALL.format(out=out1, cache=cache))
    assert main(["--config", str(p1), "decay"]) == 0
    p2 = tmp_path / "cfg2.ini"
    p2.write_text(SMALL.format(out=out2, cache=cache))
    assert main(["--config", str(p2), "decay"]) == 0
    capsys.readouterr()
    for name in ("decay_m0.csv", "decay_m1.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    r1 = json.loads((out1 / "rate_fit.json").read_text())
    r2 = json.loads((out2 / "rate_fit.json").read_text())
    assert r1["constants"] == r2["constants"]


def test_cli_modal_run_and_report(tmp_path, capsys):
    out = tmp_path / "o"
    p = write(tmp_path, SMALL.format(out=out, cache=tmp_path / "c"))
    assert main(["--config", str(p), "modal-run", "--k", "0.8"]) == 0
    assert (out / "modal_k0.8.csv").exists()
    assert main(["--config", str(p), "report"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["count"] >= 1
    capsys.readouterr()


def test_cli_rejects_bad_config(tmp_path, capsys):
    p = write(tmp_path, "[weight]\ntheta = 0.4\n")
    assert main(["--config", str(p), "assemble-kernel"]) == 2
    err = capsys.readouterr().err
    assert "theta" in err


def test_cli_seed_and_cache_overrides(tmp_path, capsys, monkeypatch):
    out = tmp_path / "o"
    p = write(tmp_path, SMALL.format(out=out, cache=tmp_path / "ignored"))
    monkeypatch.setenv("VPBLAB_CACHE_DIR", str(tmp_path / "envcache"))
    assert main(["--config", str(p), "--seed", "9", "assemble-kernel"]) == 0
    capsys.readouterr()
    assert (tmp_path / "envcache").exists()
    assert not (tmp_path / "ignored").exists()
