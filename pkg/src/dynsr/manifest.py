"""Experiment manifests: flat ``key = value`` text grouped in ``[sections]``.

Example::

    [grids]
    fine = 512x256
    coarse = 128x64

    [time]
    dt_coarse = 180
    tau = 43200

Grid sizes are written ``NLONxNLAT``. Unknown sections or keys are rejected
with the offending line number.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .exceptions import ConfigurationError

DAY = 86400.0


def _grid(text):
    try:
        nlon, nlat = (int(t) for t in text.lower().split("x"))
    except ValueError as exc:
        raise ValueError(f"expected NLONxNLAT, got {text!r}") from exc
    return (nlat, nlon)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_str(text):
    return text.strip() or None


def _opt_float(text):
    return float(text) if text.strip() else None


# section -> key -> (attribute, parser)
_SCHEMA = {
    "grids": {"fine": ("fine", _grid), "mid": ("mid", _grid), "coarse": ("coarse", _grid)},
    "time": {"dt_fine": ("dt_fine", float), "dt_mid": ("dt_mid", float), "dt_coarse": ("dt_coarse", float),
             "tau": ("tau", float), "horizon": ("horizon", float), "t_end": ("t_end", float),
             "output_interval": ("output_interval", float), "data_horizon": ("data_horizon", float)},
    "case": {"n_phi": ("n_phi", int), "n_lambda": ("n_lambda", int), "perturbed": ("perturbed", _bool)},
    "run": {"grid": ("run_grid", str), "initial": ("initial", str), "filter_lat": ("filter_lat", float)},
    "seeds": {"seed": ("seed", int)},
    "paths": {"out_dir": ("out_dir", str), "pairs": ("pairs", _opt_str), "checkpoint": ("checkpoint", _opt_str),
              "reference": ("reference", _opt_str)},
    "training": {"iterations": ("iterations", int), "batch_size": ("batch_size", int),
                 "lr_initial": ("lr_initial", float), "lr_final": ("lr_final", float),
                 "val_interval": ("val_interval", int), "val_batches": ("val_batches", int),
                 "patches_per_snapshot": ("patches_per_snapshot", int), "pixel_size": ("pixel_size", int),
                 "overlap_fraction": ("overlap_fraction", float), "gamma": ("gamma", float),
                 "epsilon": ("epsilon", float), "residual": ("residual", _bool)},
    "normalizer": {"q_u": ("q_u", _opt_float), "q_v": ("q_v", _opt_float)},
    "coupling": {"enabled": ("correction_enabled", _bool), "mode": ("correction_mode", str)},
}


@dataclass(frozen=True)
class RunManifest:
    fine: tuple = (256, 512)
    mid: tuple = (128, 256)
    coarse: tuple = (64, 128)
    dt_fine: float = 45.0
    dt_mid: float = 90.0
    dt_coarse: float = 180.0
    tau: float = 0.5 * DAY
    horizon: float = 8 * DAY
    data_horizon: float = 8 * DAY
    t_end: float = 8 * DAY
    output_interval: float = DAY
    n_phi: int = 0
    n_lambda: int = 0
    perturbed: bool = True
    run_grid: str = "coarse"
    initial: str = "analytic"
    filter_lat: float = 60.0
    seed: int = 0
    out_dir: str = "out"
    pairs: str | None = None
    checkpoint: str | None = None
    reference: str | None = None
    iterations: int = 5000
    batch_size: int = 8
    lr_initial: float = 1e-4
    lr_final: float = 1e-5
    val_interval: int = 200
    val_batches: int = 10
    patches_per_snapshot: int = 8
    pixel_size: int = 32
    overlap_fraction: float = 0.10
    gamma: float = 0.1
    epsilon: float = 1e-12
    residual: bool = True
    q_u: float | None = None
    q_v: float | None = None
    correction_enabled: bool = True
    correction_mode: str = "increment"
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if self.run_grid not in ("fine", "mid", "coarse"):
            raise ConfigurationError(f"[run] grid: expected fine, mid or coarse, got {self.run_grid!r}")
        if self.initial not in ("analytic", "restricted"):
            raise ConfigurationError(f"[run] initial: expected analytic or restricted, got {self.initial!r}")
        for name in ("fine", "mid", "coarse"):
            if self.dt(name) <= 0:
                raise ConfigurationError(f"[time] dt_{name} must be positive")
            _multiple(self.tau, self.dt(name), f"[time] tau is not a multiple of dt_{name}")
        d = self.dt(self.run_grid)
        _multiple(self.output_interval, d, f"[time] output_interval is not a multiple of dt_{self.run_grid}")
        _multiple(self.t_end, d, f"[time] t_end is not a multiple of dt_{self.run_grid}")
        _multiple(self.data_horizon, self.tau, "[time] data_horizon is not a multiple of tau")
        if (self.q_u is None) != (self.q_v is None):
            raise ConfigurationError("[normalizer] give both q_u and q_v or neither")

    def dt(self, which: str) -> float:
        return {"fine": self.dt_fine, "mid": self.dt_mid, "coarse": self.dt_coarse}[which]

    def shape(self, which: str) -> tuple:
        return {"fine": self.fine, "mid": self.mid, "coarse": self.coarse}[which]

    def path(self, value) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_text(self) -> str:
        lines = []
        for section, keys in _SCHEMA.items():
            lines.append(f"[{section}]")
            for key, (attr, parser) in keys.items():
                val = getattr(self, attr)
                if parser is _grid:
                    val = f"{val[1]}x{val[0]}"
                elif val is None:
                    val = ""
                elif isinstance(val, bool):
                    val = "true" if val else "false"
                lines.append(f"{key} = {val}")
            lines.append("")
        return "\n".join(lines)


def _multiple(span, dt, message):
    n = span / dt
    if abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise ConfigurationError(f"{message} ({span} / {dt})")


def _line_of(text, section, key):
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].strip().lower() == key:
            return no
    return None


def parse_manifest(text: str, base_dir=".") -> RunManifest:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",), strict=True)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"manifest syntax error: {exc}") from exc
    values = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown manifest section [{section}] (line {_line_of(text, section, '') or '?'})")
        for key, raw in cp.items(section):
            line = _line_of(text, section, key)
            if key not in _SCHEMA[section]:
                raise ConfigurationError(f"line {line}: unknown key '{key}' in [{section}]")
            attr, parser = _SCHEMA[section][key]
            try:
                values[attr] = parser(raw)
            except ValueError as exc:
                raise ConfigurationError(f"line {line}: [{section}] {key}: {exc}") from exc
    return RunManifest(base_dir=str(base_dir), **values)


def load_manifest(path) -> RunManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read manifest {path}: {exc}") from exc
    return parse_manifest(text, base_dir=path.parent)


def manifest_fields():
    return [f.name for f in fields(RunManifest) if f.name != "base_dir"]
