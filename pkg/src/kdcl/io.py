"""Configuration ingestion and result/report emission.

Config documents are flat YAML key/value mappings with an optional nested
``helices`` list; unknown keys are rejected so typos cannot silently fall
back to defaults. All numeric emission uses 9 significant digits with ``.``
as the decimal separator, independent of locale, and timestamps appear only
in the run manifest so every other artifact is byte-reproducible.

Jacobian logs are a binary, length-prefixed record sequence
(magic ``KDCL1\\n``, little-endian 64-bit values, row-major matrices).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .errors import ConfigError
from .observability import JacobianRecord
from .simulate import (
    AggregateMetrics,
    HelixSpec,
    SimConfig,
    TrialResult,
)

LOG_MAGIC = b"KDCL1\n"

_TOP_KEYS = {
    "n": int,
    "dt": float,
    "steps": int,
    "trials": int,
    "master_seed": int,
    "sigma_v": float,
    "sigma_omega": float,
    "sigma_meas": float,
    "prior_sigma_pos": float,
    "prior_sigma_yaw": float,
    "filters": list,
    "helices": list,
}

_HELIX_KEYS = {
    "center": list,
    "radius": float,
    "angular_rate": float,
    "vertical_rate": float,
    "z_bounds": list,
    "yaw_rate": float,
    "initial_phase": float,
    "initial_yaw": float,
}


def _coerce(key: str, value, kind):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{key}' must be a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{key}' must be an integer, got {value!r}")
        return int(value)
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(f"key '{key}' must be a list, got {value!r}")
        return value
    raise AssertionError(kind)


def _parse_helix(index: int, section) -> HelixSpec:
    if not isinstance(section, Mapping):
        raise ConfigError(f"helices[{index}] must be a mapping")
    unknown = set(section) - set(_HELIX_KEYS)
    if unknown:
        raise ConfigError(f"unknown key '{sorted(unknown)[0]}' in helices[{index}]")
    missing = set(_HELIX_KEYS) - set(section)
    if missing:
        raise ConfigError(f"helices[{index}] missing key '{sorted(missing)[0]}'")
    vals = {k: _coerce(f"helices[{index}].{k}", section[k], kind)
            for k, kind in _HELIX_KEYS.items()}
    for pair_key, n_items in (("center", 2), ("z_bounds", 2)):
        seq = vals[pair_key]
        if len(seq) != n_items or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in seq):
            raise ConfigError(f"helices[{index}].{pair_key} must be {n_items} numbers")
        vals[pair_key] = tuple(float(v) for v in seq)
    try:
        return HelixSpec(**vals)
    except ConfigError as exc:
        raise ConfigError(f"helices[{index}]: {exc}") from exc


def parse_config(document: str) -> SimConfig:
    """Parse a YAML configuration document into a validated
    :class:`SimConfig`. An empty document yields the full defaults."""
    try:
        raw = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config document: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError("config document must be a key/value mapping")
    unknown = set(raw) - set(_TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key '{sorted(unknown)[0]}'")
    kwargs = {}
    for key, kind in _TOP_KEYS.items():
        if key not in raw:
            continue
        value = _coerce(key, raw[key], kind)
        if key == "helices":
            value = tuple(_parse_helix(i, sec) for i, sec in enumerate(value))
        elif key == "filters":
            if not all(isinstance(f, str) for f in value):
                raise ConfigError("key 'filters' must be a list of names")
            value = tuple(value)
        kwargs[key] = value
    return SimConfig(**kwargs)


def load_config(path: str | Path) -> SimConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config(text)


def config_to_dict(config: SimConfig) -> dict:
    """Plain-data mirror of a config, suitable for YAML/JSON emission."""
    return {
        "n": config.n,
        "dt": config.dt,
        "steps": config.steps,
        "trials": config.trials,
        "master_seed": config.master_seed,
        "sigma_v": config.sigma_v,
        "sigma_omega": config.sigma_omega,
        "sigma_meas": config.sigma_meas,
        "prior_sigma_pos": config.prior_sigma_pos,
        "prior_sigma_yaw": config.prior_sigma_yaw,
        "filters": list(config.filters),
        "helices": [
            {
                "center": list(h.center),
                "radius": h.radius,
                "angular_rate": h.angular_rate,
                "vertical_rate": h.vertical_rate,
                "z_bounds": list(h.z_bounds),
                "yaw_rate": h.yaw_rate,
                "initial_phase": h.initial_phase,
                "initial_yaw": h.initial_yaw,
            }
            for h in config.helices
        ],
    }


def serialize_config(config: SimConfig) -> str:
    """YAML text that parses back to an identical config."""
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)


# --------------------------------------------------------------------------
# CSV / manifest emission
# --------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".9g")


CURVE_COLUMNS = ("step", "time_s", "filter", "robot",
                 "err_px", "err_py", "err_pz", "err_yaw",
                 "sig3_px", "sig3_py", "sig3_pz", "sig3_yaw", "nees")


def write_summary_csv(path: Path, filters: Sequence[str], summary: Mapping) -> None:
    lines = ["filter,rmse_pos_m,rmse_ori_rad,nees"]
    for kind in filters:
        s = summary[kind]
        lines.append(f"{kind},{_fmt(s.rmse_pos)},{_fmt(s.rmse_ori)},{_fmt(s.nees)}")
    path.write_text("\n".join(lines) + "\n")


def write_curves_csv(path: Path, filters: Sequence[str], dt: float,
                     curve_arrays: Mapping) -> None:
    """``curve_arrays`` maps filter -> (err (S,n,4), sig3 (S,n,4), nees (S,n))."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CURVE_COLUMNS) + "\n")
        for kind in filters:
            err, sig3, nees_vals = curve_arrays[kind]
            steps, n = nees_vals.shape
            for robot in range(n):
                for k in range(steps):
                    row = [str(k + 1), _fmt((k + 1) * dt), kind, str(robot)]
                    row += [_fmt(v) for v in err[k, robot]]
                    row += [_fmt(v) for v in sig3[k, robot]]
                    row.append(_fmt(nees_vals[k, robot]))
                    fh.write(",".join(row) + "\n")


def emit_results(metrics: AggregateMetrics, out_dir: str | Path) -> list[Path]:
    """Write the Monte-Carlo summary table and per-step aggregate curves."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary_path = out / "summary.csv"
    curves_path = out / "curves.csv"
    write_summary_csv(summary_path, metrics.filters, metrics.summary)
    curve_arrays = {
        k: (metrics.curves[k].err_rms, metrics.curves[k].sig3_mean,
            metrics.curves[k].nees_mean)
        for k in metrics.filters
    }
    write_curves_csv(curves_path, metrics.filters, metrics.config.dt, curve_arrays)
    return [summary_path, curves_path]


def emit_trial_results(result: TrialResult, dt: float,
                       out_dir: str | Path) -> list[Path]:
    """Write one trial's signed error curves."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves_path = out / "curves.csv"
    curve_arrays = {
        k: (result.err[k], result.sig3[k], result.nees[k])
        for k in result.filters
    }
    write_curves_csv(curves_path, result.filters, dt, curve_arrays)
    return [curves_path]


def write_manifest(path: Path, config: SimConfig, summary: Mapping | None,
                   started_at: str, finished_at: str,
                   failed_trials: Sequence[int] = (),
                   extra: Mapping | None = None) -> None:
    from . import __version__

    doc = {
        "tool": "kdcl",
        "version": __version__,
        "master_seed": config.master_seed,
        "started_at": started_at,
        "finished_at": finished_at,
        "config": config_to_dict(config),
        "failed_trials": list(failed_trials),
    }
    if summary is not None:
        doc["summary"] = {
            kind: {
                "rmse_pos_m": s.rmse_pos,
                "rmse_ori_rad": s.rmse_ori,
                "nees": s.nees,
            }
            for kind, s in summary.items()
        }
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Binary Jacobian logs
# --------------------------------------------------------------------------

def write_jacobian_log(path: str | Path, kind: str,
                       records: Iterable[JacobianRecord]) -> None:
    records = list(records)
    if not records:
        raise ValueError("no records to write")
    dim = records[0].f.shape[0]
    kind_b = kind.encode()
    with open(path, "wb") as fh:
        fh.write(LOG_MAGIC)
        fh.write(struct.pack("<QQ", dim, len(kind_b)))
        fh.write(kind_b)
        for rec in records:
            f = np.ascontiguousarray(rec.f, dtype="<f8")
            h = np.ascontiguousarray(rec.h, dtype="<f8")
            mean = np.ascontiguousarray(rec.mean, dtype="<f8")
            if f.shape != (dim, dim) or h.shape[1:] != (dim,) or mean.shape != (dim,):
                raise ValueError(f"record {rec.step} has inconsistent shapes")
            payload = struct.pack("<qQ", rec.step, h.shape[0])
            payload += mean.tobytes() + f.tobytes() + h.tobytes()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_jacobian_log(path: str | Path) -> tuple[str, list[JacobianRecord]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read jacobian log {path}: {exc}") from exc
    if not blob.startswith(LOG_MAGIC):
        raise ConfigError(f"{path} is not a jacobian log (bad magic)")
    off = len(LOG_MAGIC)
    dim, kind_len = struct.unpack_from("<QQ", blob, off)
    off += 16
    kind = blob[off : off + kind_len].decode()
    off += kind_len
    records: list[JacobianRecord] = []
    last_step = None
    while off < len(blob):
        (rec_len,) = struct.unpack_from("<Q", blob, off)
        off += 8
        payload = blob[off : off + rec_len]
        if len(payload) != rec_len:
            raise ConfigError(f"{path} is truncated")
        off += rec_len
        step, h_rows = struct.unpack_from("<qQ", payload, 0)
        if last_step is not None and step <= last_step:
            raise ConfigError(f"{path} has non-increasing step numbers")
        last_step = step
        cursor = 16
        mean = np.frombuffer(payload, dtype="<f8", count=dim, offset=cursor).copy()
        cursor += 8 * dim
        f = np.frombuffer(payload, dtype="<f8", count=dim * dim,
                          offset=cursor).reshape(dim, dim).copy()
        cursor += 8 * dim * dim
        h = np.frombuffer(payload, dtype="<f8", count=h_rows * dim,
                          offset=cursor).reshape(h_rows, dim).copy()
        records.append(JacobianRecord(step, f, h, mean))
    return kind, records
