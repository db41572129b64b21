"""Experiment configuration: INI-style key-value files with strict
validation.

Unknown keys are rejected (typos in physics parameters must not pass
silently) and every violation is collected before reporting, so a bad file
is diagnosed in one round.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path


@dataclass
class ExperimentConfig:
    # kernel section
    gamma: float = -1.0
    c_q: float = 1.0
    R: float = 6.0
    n: int = 16
    n_omega: int = 16
    gain_interp: str = "split_quadratic"
    repair: bool = True
    clip_tolerance: float = 0.05
    # weight section
    q: float = 0.0
    lam: float = 0.02
    theta: float = 0.25
    ell: float = 1.0
    ell0: float = 2.6
    # modal section
    k_min: float = 0.02
    k_max: float = 8.0
    k_count: int = 24
    T: float = 200.0
    dt: float = 0.0            # 0: stability bound per mode
    fit_lo: float = 20.0
    fit_hi: float = 200.0
    J: float = 2.0
    p: float = 1.5
    eps_envelope: float = 0.0  # 0: derive from the fitted Lyapunov constant
    neutral: bool = True
    # nonlinear section
    L_x: float = 6.283185307179586
    n_x: int = 8
    eps0: float = 1e-3
    n_derivs: int = 1
    ell_nl: float = 3.0
    T_nl: float = 50.0
    # output / run section
    output_dir: str = "out"
    seed: int = 0
    threads: int = 1
    cache_dir: str = ".vpb-cache"

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_SCHEMA: dict[str, dict[str, type]] = {
    "kernel": {"gamma": float, "c_q": float, "R": float, "n": int,
               "n_omega": int, "gain_interp": str, "repair": bool,
               "clip_tolerance": float},
    "weight": {"q": float, "lam": float, "theta": float, "ell": float,
               "ell0": float},
    "modal": {"k_min": float, "k_max": float, "k_count": int, "T": float,
              "dt": float, "fit_lo": float, "fit_hi": float, "J": float,
              "p": float, "eps_envelope": float, "neutral": bool},
    "nonlinear": {"L_x": float, "n_x": int, "eps0": float, "n_derivs": int,
                  "ell_nl": float, "T_nl": float},
    "output": {"output_dir": str, "seed": int, "threads": int,
               "cache_dir": str},
}

# field name collisions between sections are avoided by construction
_FIELD_SECTION = {name: sec for sec, names in _SCHEMA.items() for name in names}


class ConfigError(ValueError):
    """Carries every violation found in a config file."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


def _parse_bool(text: str) -> bool:
    lower = text.strip().lower()
    if lower in ("1", "true", "yes", "on"):
        return True
    if lower in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def validate(cfg: ExperimentConfig) -> list[str]:
    """Cross-field constraints re-validated centrally; returns all
    violations (empty list when valid).  gamma below the guaranteed range
    is a warning, not a violation."""
    bad = []
    if not -3.0 <= cfg.gamma < 0.0:
        bad.append(f"kernel.gamma must lie in [-3, 0), got {cfg.gamma}")
    if cfg.c_q <= 0:
        bad.append(f"kernel.c_q must be positive, got {cfg.c_q}")
    if cfg.R <= 0 or cfg.n < 2:
        bad.append(f"kernel grid invalid: R={cfg.R}, n={cfg.n}")
    if cfg.n_omega < 2 or cfg.n_omega % 2:
        bad.append(f"kernel.n_omega must be even >= 2, got {cfg.n_omega}")
    if cfg.gain_interp not in ("linear", "split_quadratic"):
        bad.append(f"kernel.gain_interp unknown: {cfg.gain_interp!r}")
    if not 0.0 < cfg.clip_tolerance <= 1.0:
        bad.append(f"kernel.clip_tolerance must lie in (0, 1], got {cfg.clip_tolerance}")
    if not 0.0 <= cfg.q <= 0.05:
        bad.append(f"weight.q must lie in [0, 0.05], got {cfg.q}")
    if not 0.0 <= cfg.lam <= 0.05:
        bad.append(f"weight.lam must lie in [0, 0.05], got {cfg.lam}")
    if not 0.0 < cfg.theta <= 0.25:
        bad.append(f"weight.theta must lie in (0, 1/4], got {cfg.theta}")
    if cfg.ell < 0:
        bad.append(f"weight.ell must be >= 0, got {cfg.ell}")
    if cfg.ell0 <= 2.5:
        bad.append(f"weight.ell0 must exceed 5/2 for decay runs, got {cfg.ell0}")
    if not 0.0 < cfg.k_min < cfg.k_max:
        bad.append(f"modal k-grid invalid: [{cfg.k_min}, {cfg.k_max}]")
    if cfg.k_count < 2:
        bad.append(f"modal.k_count must be >= 2, got {cfg.k_count}")
    if cfg.T <= 0 or not (0.0 <= cfg.fit_lo < cfg.fit_hi <= cfg.T):
        bad.append(f"modal times invalid: T={cfg.T}, window=({cfg.fit_lo}, {cfg.fit_hi})")
    if cfg.J <= 0 or cfg.p <= 1.0:
        bad.append(f"modal envelope needs J > 0 and p > 1, got J={cfg.J}, p={cfg.p}")
    if cfg.n_x < 4 or cfg.n_x % 2:
        bad.append(f"nonlinear.n_x must be even >= 4, got {cfg.n_x}")
    if cfg.L_x <= 0 or cfg.eps0 <= 0 or cfg.T_nl <= 0:
        bad.append("nonlinear.L_x, eps0, T_nl must be positive")
    if cfg.ell_nl < 1 + cfg.n_derivs:
        bad.append(f"nonlinear.ell_nl must be >= 1 + n_derivs, got {cfg.ell_nl}")
    if cfg.threads < 1:
        bad.append(f"output.threads must be >= 1, got {cfg.threads}")
    return bad


def parse_config(path, strict: bool = True) -> ExperimentConfig:
    """Read, type-check and validate a config file.

    Missing keys take defaults.  Unknown sections/keys are rejected in
    strict mode.  All problems are raised together as ConfigError.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str       # keys are case-sensitive (R vs r)
    parser.read(path)
    problems: list[str] = []
    values: dict[str, object] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            if strict:
                problems.append(f"unknown section [{section}]")
            continue
        for key, text in parser.items(section):
            if key not in _SCHEMA[section]:
                if strict:
                    problems.append(f"unknown key {section}.{key}")
                continue
            typ = _SCHEMA[section][key]
            try:
                if typ is bool:
                    values[key] = _parse_bool(text)
                else:
                    values[key] = typ(text)
            except ValueError:
                problems.append(f"{section}.{key}: cannot parse {text!r} as {typ.__name__}")
    cfg = ExperimentConfig(**values) if not problems else ExperimentConfig(
        **{k: v for k, v in values.items()})
    problems.extend(validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def echo(cfg: ExperimentConfig) -> str:
    """Round-trippable INI rendering of the effective configuration."""
    lines = []
    d = asdict(cfg)
    for section, names in _SCHEMA.items():
        lines.append(f"[{section}]")
        for name in names:
            lines.append(f"{name} = {d[name]}")
        lines.append("")
    return "\n".join(lines)


def write_default_config(path) -> None:
    Path(path).write_text(echo(ExperimentConfig()))
