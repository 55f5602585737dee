"""Configuration files, presets and the exported output bundle.

Configs are TOML documents whose keys mirror :class:`ScenarioConfig`;
nested ``[qnd]`` and ``[timings]`` tables carry the probe and sequence
timings.  Exports are plain CSV with ``#`` unit comments plus JSON.
"""
from __future__ import annotations

import csv
import dataclasses
import difflib
import hashlib
import io as _io
import json
import math
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import metrology
from .errors import ExportError, InvalidConfigError
from .harness import RunReport, ScenarioConfig, Timings, prepare_network
from .measurement import QndConfig

# per-pulse LO phase std giving 3.6 mrad of technical theta noise on a single-mode
# echo; the echo pulses respond with gains (-1, 2, -1), hence the sqrt(6)
LO_NOISE_STD = 3.6e-3 / math.sqrt(6.0)
# probe resolutions from calibrate_probe: -8.6 dB on the M=2 Ramsey clock (seed 7)
# and a 1.6 dB ME-over-CSS gain on the interferometer (seed 1011, 3 x 1000 trials,
# kept apart from the preset seed so the preset run is an independent check)
CLOCK_RESOLUTION_STD = 31.151149104316858
INTERFEROMETER_RESOLUTION_STD = 366.05026007140566

PRESETS: dict[str, tuple[str, dict]] = {
    "fig2a": (
        "differential phase response of single modes and the entangled pair",
        {
            "scenario": "phase-scan",
            "seed": 20201,
            "atoms_per_mode": 40000.0,
            "lo_noise_std": LO_NOISE_STD,
            "variants": ["mode+", "mode-", "ME"],
            "qnd": {"resolution_std": CLOCK_RESOLUTION_STD},
        },
    ),
    "fig2b": (
        "theta histograms of single modes, their average and the entangled pair at zero phase",
        {
            "scenario": "phase-scan",
            "seed": 20202,
            "atoms_per_mode": 40000.0,
            "lo_noise_std": LO_NOISE_STD,
            "sweep": [0.0],
            "qnd": {"resolution_std": CLOCK_RESOLUTION_STD},
        },
    ),
    "fig2c": (
        "echo response to a magnetic gradient scanned in coil current",
        {
            "scenario": "gradient-scan",
            "seed": 20203,
            "lo_noise_std": LO_NOISE_STD,
            "qnd": {"resolution_std": CLOCK_RESOLUTION_STD},
        },
    ),
    "fig3": (
        "Ramsey sensitivity versus mode count for ME, MS and coherent networks",
        {
            "scenario": "network-scaling",
            "seed": 7,
            "atoms_per_mode": 45000.0,
            "trials": 200,
            "sets": 3,
            "sweep": [1.0, 2.0, 4.0],
            "lo_noise_std": LO_NOISE_STD,
            "qnd": {"resolution_std": CLOCK_RESOLUTION_STD},
        },
    ),
    "fig4": (
        "differential interferometer with ME and coherent input, histograms and stability",
        {
            "scenario": "interferometer",
            "seed": 11,
            "atoms_per_mode": 110000.0,
            "contrast": 0.40,
            "raman_phase_std": 0.010,
            "readout_std": 36.0,
            "qnd": {"resolution_std": INTERFEROMETER_RESOLUTION_STD},
        },
    ),
    "contrast": (
        "inter-mode contrast versus separation time",
        {"scenario": "contrast-curve", "seed": 4},
    ),
}

_NESTED = {"qnd": QndConfig, "timings": Timings}
_INT_FIELDS = {"seed", "M", "trials", "sets"}
_TUPLE_FIELDS = {"sweep", "variants", "accelerations"}


# -- parsing ------------------------------------------------------------------


def _unknown(key: str, allowed, where: str) -> InvalidConfigError:
    hint = difflib.get_close_matches(key, list(allowed), n=1)
    extra = f"; did you mean {hint[0]!r}?" if hint else ""
    return InvalidConfigError(f"unknown key {where}{key!r}{extra}")


def _coerce(name: str, value, kind: str):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise InvalidConfigError(f"{name} must be true or false, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise InvalidConfigError(f"{name} must be a string, got {value!r}")
        return value
    raise AssertionError(kind)


def _field_kind(cls, f: dataclasses.Field) -> str:
    default = f.default if f.default is not dataclasses.MISSING else None
    if f.name in _INT_FIELDS:
        return "int"
    if isinstance(default, bool):
        return "bool"
    if isinstance(default, str) or f.name == "scenario":
        return "str"
    return "float"


def _build_nested(cls, data, where: str):
    if not isinstance(data, dict):
        raise InvalidConfigError(f"[{where}] must be a table")
    names = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise _unknown(key, names, f"{where}.")
        kwargs[key] = _coerce(f"{where}.{key}", value, _field_kind(cls, names[key]))
    return cls(**kwargs)


def config_from_dict(data: dict) -> ScenarioConfig:
    """Validate a plain mapping and build a ScenarioConfig with defaults applied."""
    names = {f.name: f for f in fields(ScenarioConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise _unknown(key, names, "")
        if key in _NESTED:
            kwargs[key] = _build_nested(_NESTED[key], value, key)
        elif key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise InvalidConfigError(f"{key} must be an array")
            kind = "str" if key == "variants" else "float"
            kwargs[key] = tuple(_coerce(f"{key}[{i}]", v, kind) for i, v in enumerate(value))
        else:
            kwargs[key] = _coerce(key, value, _field_kind(ScenarioConfig, names[key]))
    for required in ("scenario", "seed"):
        if required not in kwargs:
            raise InvalidConfigError(f"missing required key {required!r}")
    return ScenarioConfig(**kwargs)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    out = {}
    for f in fields(ScenarioConfig):
        value = getattr(cfg, f.name)
        if f.name in _NESTED:
            out[f.name] = {g.name: getattr(value, g.name) for g in fields(_NESTED[f.name])}
        elif f.name in _TUPLE_FIELDS:
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def _parse_toml(text: str, source: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # the decoder message already carries "(at line L, column C)"
        raise InvalidConfigError(f"{source}: parse error: {exc}") from exc


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_override(data: dict, override: str) -> None:
    """Apply one ``key=value`` override (dotted keys reach nested tables)."""
    if "=" not in override:
        raise InvalidConfigError(f"override {override!r} is not of the form key=value")
    key, raw = (s.strip() for s in override.split("=", 1))
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise InvalidConfigError(f"override {key!r} descends into a non-table value")
    node[parts[-1]] = _parse_value(raw)


def _merge(base: dict, new: dict) -> dict:
    out = dict(base)
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise _unknown(name, PRESETS, "preset ")
    return json.loads(json.dumps(PRESETS[name][1]))


def parse_config(
    path: str | Path | None = None,
    *,
    text: str | None = None,
    preset: str | None = None,
    overrides=(),
) -> ScenarioConfig:
    """Read a config from a preset, a TOML file or string, then apply overrides.

    Later sources win: preset < file/text < overrides.
    """
    data: dict = preset_dict(preset) if preset else {}
    if path is not None:
        p = Path(path)
        try:
            raw = p.read_text()
        except OSError as exc:
            raise InvalidConfigError(f"cannot read config {p}: {exc.strerror or exc}") from exc
        data = _merge(data, _parse_toml(raw, str(p)))
    if text is not None:
        data = _merge(data, _parse_toml(text, "<config>"))
    for ov in overrides:
        apply_override(data, ov)
    return config_from_dict(data)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise InvalidConfigError(f"cannot serialise {value!r}")


def serialize_config(cfg: ScenarioConfig) -> str:
    """TOML text that parses back to an equal config."""
    d = config_to_dict(cfg)
    lines = []
    tables = []
    for key, value in d.items():
        if isinstance(value, dict):
            tables.append((key, value))
        else:
            lines.append(f"{key} = {_toml_value(value)}")
    for name, table in tables:
        lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in table.items())
    return "\n".join(lines) + "\n"


def config_hash(cfg: ScenarioConfig | None) -> str:
    data = b"" if cfg is None else serialize_config(cfg).encode()
    return hashlib.sha256(data).hexdigest()


# -- export -------------------------------------------------------------------

TRIAL_COLUMNS = ("set", "trial", "outcome_first", "outcome_second", "delta_jz", "theta_bar", "variant", "sweep_value", "group")


@dataclass(frozen=True)
class OutputBundle:
    directory: Path
    manifest: Path
    config: Path
    trials: Path
    summary: Path
    figures: tuple[Path, ...]


def _num(x) -> str:
    return repr(float(x))


class _Writer:
    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.written: list[Path] = []

    def text(self, name: str, content: str) -> Path:
        path = self.out_dir / name
        try:
            with open(path, "w", newline="") as fh:
                fh.write(content)
        except OSError as exc:
            raise ExportError(f"cannot write {path}: {exc.strerror or exc}") from exc
        self.written.append(path)
        return path

    def table(self, name: str, comments, header, rows) -> Path:
        buf = _io.StringIO()
        for c in comments:
            buf.write(f"# {c}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])
        return self.text(name, buf.getvalue())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def summary_document(report: RunReport) -> dict:
    groups = []
    for g in report.groups:
        groups.append(
            {
                "group": g.group_id,
                "variant": g.variant,
                "sweep_value": g.sweep_value,
                "n_modes": g.n_modes,
                "atoms_per_mode": g.atoms_per_mode,
                "readout_contrast": g.contrast,
                "per_set": [s.to_dict() for s in g.per_set],
                "pooled": g.pooled.to_dict(),
            }
        )
    derived = {k: v for k, v in report.derived.items() if k != "histograms"}
    return _jsonable(
        {
            "units": {"theta": "rad", "delta_jz": "spins", "xi_net": "dB", "variance": "squared units"},
            "scenario": report.config.scenario if report.config else None,
            "groups": groups,
            "derived": derived,
        }
    )


def _histogram_rows(samples: dict, bins: int = 25):
    rows = []
    for variant, values in samples.items():
        x = np.asarray(values, dtype=float) * 1e3
        if x.size < 3:
            continue
        counts, edges = np.histogram(x, bins=bins)
        fit = metrology.fit_gaussian(x)
        width = edges[1] - edges[0]
        centres = 0.5 * (edges[1:] + edges[:-1])
        model = x.size * width * metrology.stats.norm.pdf(centres, fit.mean, fit.std)
        for lo, hi, c, m in zip(edges[:-1], edges[1:], counts, model):
            rows.append((variant, float(lo), float(hi), int(c), float(m)))
    return rows


def _moment_grid(cfg: ScenarioConfig, points: int = 41):
    """Prior and post-probe Gaussian densities of (Jz_1, Jz_2) on a grid."""
    state = prepare_network(2, cfg.atoms_per_mode, cfg.contrast, cfg.separation)
    prior = state.jz_covariance
    h = np.ones(2)
    r2 = cfg.qnd.resolution_std**2 if cfg.qnd.informative else math.inf
    post = prior - np.outer(prior @ h, prior @ h) / (h @ prior @ h + r2) if math.isfinite(r2) else prior
    span = 3.0 * math.sqrt(prior[0, 0])
    axis = np.linspace(-span, span, points)
    rows = []
    for name, cov in (("prior", prior), ("conditional", post)):
        inv = np.linalg.inv(cov)
        norm = 1.0 / (2 * math.pi * math.sqrt(np.linalg.det(cov)))
        for a in axis:
            for b in axis:
                v = np.array([a, b])
                rows.append((name, float(a), float(b), float(norm * math.exp(-0.5 * v @ inv @ v)),
                             float(metrology.stats.norm.pdf(a, 0.0, math.sqrt(cov[0, 0])))))
    return rows


def _figure_files(w: _Writer, report: RunReport) -> None:
    cfg = report.config
    d = report.derived
    sc = cfg.scenario
    if sc == "phase-scan":
        rows = []
        for g in report.groups:
            fit = d["fits"].get(g.variant)
            line = fit["intercept"] + fit["slope"] * g.sweep_value if fit else math.nan
            rows.append((g.variant, g.sweep_value, g.pooled.mean_theta, g.pooled.sem_theta, line))
        w.table("fig2a_phase_scan.csv", ["phase offset and theta in rad; fit_rad is the least-squares line per variant"],
                ("variant", "phase_rad", "mean_theta_rad", "sem_theta_rad", "fit_rad"), rows)
        w.table("fig2b_histograms.csv", [f"theta in mrad at phase offset {d['histogram_phase']!r} rad; MS is the mean of mode+ and mode-"],
                ("variant", "bin_lo_mrad", "bin_hi_mrad", "count", "gaussian_fit_count"), _histogram_rows(d["histograms"]))
    elif sc == "gradient-scan":
        rows = [(g.variant, g.sweep_value, g.pooled.mean_theta * 1e3, g.pooled.sem_theta * 1e3) for g in report.groups]
        w.table("fig2c_gradient.csv", ["coil current in A; theta and its standard error in mrad"],
                ("variant", "amperes", "theta_mrad", "sem_mrad"), rows)
    elif sc == "network-scaling":
        rows = []
        for p in d["points"]:
            for v in ("ME", "MS", "CSS"):
                if f"{v}_dtheta_rad" in p:
                    rows.append((p["M"], v, p[f"{v}_dtheta_rad"] * 1e3, p[f"{v}_dtheta_err_rad"] * 1e3, p[f"{v}_xi_db"]))
            rows.append((p["M"], "QPN", p["qpn_rad"] * 1e3, 0.0, 0.0))
        for key, e in d.get("projected_ms", {}).items():
            rows.append((e["M"], "MS-projected", e["projected_dtheta_rad"] * 1e3, 0.0, math.nan))
        w.table("fig3_scaling.csv", ["phase sensitivity in mrad; xi_net in dB relative to the coherent-state level"],
                ("M", "series", "dtheta_mrad", "err_mrad", "xi_db"), rows)
    elif sc == "interferometer":
        hist = {g.variant: report.values(g.group_id).tolist() for g in report.groups}
        w.table("fig4a_histograms.csv", ["theta in mrad"],
                ("variant", "bin_lo_mrad", "bin_hi_mrad", "count", "gaussian_fit_count"), _histogram_rows(hist))
        rows = []
        for g in report.groups:
            for e in d.get(g.variant, {}).get("stability", []):
                rows.append((g.variant, e["n"], e["deviation_rad"] * 1e3, e["lower_rad"] * 1e3, e["upper_rad"] * 1e3))
        w.table("fig4b_stability.csv", ["overlapping Allan deviation of theta in mrad versus number of averaged shots (set 0)"],
                ("variant", "n", "deviation_mrad", "lower_mrad", "upper_mrad"), rows)
    elif sc == "contrast-curve":
        rows = list(zip(d["separation_time_s"], d["contrast_mean"], d["contrast_sem"]))
        if "fit_C0" in d:
            rows = [(t, c, s, d["fit_C0"] * math.exp(-t / d["fit_beta_s"])) for t, c, s in rows]
        else:
            rows = [(t, c, s, math.nan) for t, c, s in rows]
        w.table("contrast_curve.csv", ["separation time in s; contrast dimensionless; fit is C0 exp(-t/beta)"],
                ("separation_s", "contrast", "sem", "fit"), rows)
    if sc != "contrast-curve":
        w.table("fig1_moments.csv",
                ["Gaussian densities of (Jz_1, Jz_2) in spins^-2 before and after the shared probe; marginal_jz1 in spins^-1"],
                ("distribution", "jz1_spins", "jz2_spins", "density", "marginal_jz1"), _moment_grid(cfg))


def trial_rows(report: RunReport):
    for r in report.rows:
        rec = r.record
        yield (r.set_index, r.trial_index, float(rec.first_outcome), float(rec.second_outcome),
               float(rec.delta_jz), float(rec.theta_bar), r.variant, float(r.sweep_value), r.group_id)


def export(report: RunReport, out_dir: str | Path) -> OutputBundle:
    """Write the trial table, summary, per-figure data and a manifest to ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExportError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    w = _Writer(out)
    cfg = report.config
    config_path = w.text("config.toml", serialize_config(cfg) if cfg is not None else "")
    trials_path = w.table(
        "trials.csv",
        [
            "outcome_first, outcome_second, delta_jz in spins; theta_bar in rad",
            "contrast-curve rows hold trough and peak readings and the contrast estimate in theta_bar",
        ],
        TRIAL_COLUMNS,
        trial_rows(report),
    )
    summary_path = w.text("summary.json", json.dumps(summary_document(report), indent=2) + "\n")
    figures_start = len(w.written)
    if cfg is not None and report.groups:
        _figure_files(w, report)
    figures = tuple(w.written[figures_start:])
    from . import __version__

    manifest = {
        "config_sha256": config_hash(cfg),
        "seed": cfg.seed if cfg is not None else None,
        "scenario": cfg.scenario if cfg is not None else None,
        "versions": {
            "spinnet": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "files": [p.name for p in w.written],
    }
    manifest_path = w.text("manifest.json", json.dumps(manifest, indent=2) + "\n")
    return OutputBundle(out, manifest_path, config_path, trials_path, summary_path, figures)


def read_trials(path: str | Path) -> list[dict]:
    """Load an exported trial table back into dictionaries of typed values."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append(
            {
                "set": int(rec["set"]),
                "trial": int(rec["trial"]),
                "outcome_first": float(rec["outcome_first"]),
                "outcome_second": float(rec["outcome_second"]),
                "delta_jz": float(rec["delta_jz"]),
                "theta_bar": float(rec["theta_bar"]),
                "variant": rec["variant"],
                "sweep_value": float(rec["sweep_value"]),
                "group": int(rec["group"]),
            }
        )
    return rows
