"""Run configuration read from INI files.

Sections::

    [model]    name = furuta | pendulum; dry_friction = auto | true | false
    [fixed]    parameter = value            (held constant; quaternions as 4 numbers)
    [free]     parameter = initial [lower upper]
    [method]   h, kappa, eps_compliance, eps_g, eps_delta, max_iter, window
    [data]     cutoff_hz, unwrap
    [synth]    scenario, duration, h_gen, sample_dt, noise_sd, seed, counts_per_rev
    [truth]    parameter = value            (used by ``synth``)
    [sweep]    param = kappa | h | eps; grid = comma separated values

Unknown sections or keys are rejected so typos do not pass silently.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .estimator import ParamSpace
from .models import MultibodyModel, build_model, default_bounds

SECTIONS = {
    "model": {"name", "dry_friction"},
    "fixed": None,
    "free": None,
    "method": {"h", "kappa", "eps_compliance", "eps_g", "eps_delta", "max_iter", "window"},
    "data": {"cutoff_hz", "unwrap"},
    "synth": {"scenario", "duration", "h_gen", "sample_dt", "noise_sd", "seed", "counts_per_rev"},
    "truth": None,
    "sweep": {"param", "grid"},
}
SWEEPABLE = ("kappa", "h", "eps")


class ConfigError(ValueError):
    pass


@dataclass
class SynthSettings:
    scenario: str = "release"
    duration: float = 3.0
    h_gen: float = 1e-4
    sample_dt: float = 1e-3
    noise_sd: float = 0.001
    seed: int = 0
    counts_per_rev: int = 0


@dataclass
class RunConfig:
    model: str = "furuta"
    dry_friction: bool | None = None
    fixed: dict = field(default_factory=dict)
    free: dict = field(default_factory=dict)
    lower: dict = field(default_factory=dict)
    upper: dict = field(default_factory=dict)
    h: float = 0.01
    kappa: float = 100.0
    eps_compliance: float | None = None
    eps_g: float = 10.0
    eps_delta: float = 1e-6
    max_iter: int = 20
    window: int = 256
    cutoff_hz: float = 10.0
    unwrap: bool = True
    synth: SynthSettings = field(default_factory=SynthSettings)
    truth: dict = field(default_factory=dict)
    sweep_param: str = "kappa"
    sweep_grid: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigError("h must be positive")
        if not self.kappa > 0:
            raise ConfigError("kappa must be positive")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be non-negative")
        if self.sweep_param not in SWEEPABLE:
            raise ConfigError(f"sweep param must be one of {SWEEPABLE}")

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self

    def fixed_params(self, model_defaults=None) -> dict:
        out = dict(self.fixed)
        if self.eps_compliance is not None:
            keys = model_defaults or {}
            for k in keys:
                if k.startswith("eps"):
                    out[k] = self.eps_compliance
        return out

    def build(self, extra: dict | None = None) -> MultibodyModel:
        """Model with the fixed parameters, the free initial values and ``extra`` applied."""
        base = build_model(self.model)
        params = self.fixed_params(base.defaults)
        params.update(self.free)
        params.update(extra or {})
        unknown = sorted(k for k in params if k not in base.defaults)
        if unknown:
            raise ConfigError(f"unknown parameters for model {self.model!r}: {unknown}")
        try:
            return build_model(self.model, params, dry=self.dry_friction)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def param_space(self, model: MultibodyModel, values: dict | None = None) -> ParamSpace:
        """Free parameters; the model's default set when ``[free]`` is empty."""
        if not self.free:
            return ParamSpace.from_model(model, values={k: v for k, v in (values or {}).items()
                                                        if k in model.free_default})
        unknown = [k for k in self.free if k not in model.defaults]
        if unknown:
            raise ConfigError(f"unknown free parameters: {unknown}")
        vals = {k: (values or {}).get(k, v) for k, v in self.free.items()}
        try:
            return ParamSpace(
                tuple(self.free),
                vals,
                {k: self.lower.get(k, default_bounds(k)[0]) for k in self.free},
                {k: self.upper.get(k, default_bounds(k)[1]) for k in self.free},
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _numbers(text: str, key: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {text!r}") from None


def _value(text: str, key: str):
    nums = _numbers(text, key)
    if len(nums) == 1:
        return nums[0]
    if len(nums) == 4:
        return np.array(nums)
    raise ConfigError(f"{key}: expected 1 or 4 numbers")


def _bool(text: str, key: str) -> bool | None:
    t = text.strip().lower()
    if t in ("auto", ""):
        return None
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected true, false or auto")


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # parameter names are case sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        allowed = SECTIONS[sec]
        if allowed is not None:
            extra = set(cp[sec]) - allowed
            if extra:
                raise ConfigError(f"unknown keys in [{sec}]: {sorted(extra)}")

    kw: dict = {}
    if cp.has_section("model"):
        m = cp["model"]
        kw["model"] = m.get("name", "furuta").strip()
        kw["dry_friction"] = _bool(m.get("dry_friction", "auto"), "dry_friction")
    if cp.has_section("fixed"):
        kw["fixed"] = {k: _value(v, k) for k, v in cp["fixed"].items()}
    if cp.has_section("truth"):
        kw["truth"] = {k: _value(v, k) for k, v in cp["truth"].items()}
    if cp.has_section("free"):
        free, lo, hi = {}, {}, {}
        for k, v in cp["free"].items():
            nums = _numbers(v, k)
            if len(nums) == 4:
                free[k] = np.array(nums)
            elif len(nums) in (1, 3):
                free[k] = nums[0]
                if len(nums) == 3:
                    lo[k], hi[k] = nums[1], nums[2]
            else:
                raise ConfigError(f"{k}: expected 'initial', 'initial lower upper' or a quaternion")
        kw.update(free=free, lower=lo, upper=hi)
    try:
        if cp.has_section("method"):
            m = cp["method"]
            for key, conv in (("h", float), ("kappa", float), ("eps_compliance", float), ("eps_g", float),
                              ("eps_delta", float), ("max_iter", int), ("window", int)):
                if key in m:
                    kw[key] = conv(m[key])
        if cp.has_section("data"):
            d = cp["data"]
            if "cutoff_hz" in d:
                kw["cutoff_hz"] = float(d["cutoff_hz"])
            if "unwrap" in d:
                kw["unwrap"] = bool(_bool(d["unwrap"], "unwrap"))
        if cp.has_section("synth"):
            s = cp["synth"]
            kw["synth"] = SynthSettings(
                s.get("scenario", "release").strip(),
                float(s.get("duration", 3.0)),
                float(s.get("h_gen", 1e-4)),
                float(s.get("sample_dt", 1e-3)),
                float(s.get("noise_sd", 0.001)),
                int(s.get("seed", 0)),
                int(s.get("counts_per_rev", 0)),
            )
        if cp.has_section("sweep"):
            s = cp["sweep"]
            kw["sweep_param"] = s.get("param", "kappa").strip()
            if "grid" in s:
                kw["sweep_grid"] = tuple(_numbers(s["grid"], "grid"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return RunConfig(**kw)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


def format_params(values: dict, std: dict | None = None) -> str:
    """``name = value`` lines (quaternions as four numbers), optionally with ``name.std`` lines."""
    lines = []
    for k, v in values.items():
        arr = np.atleast_1d(np.asarray(v, dtype=float))
        lines.append(f"{k} = " + " ".join(repr(float(x)) for x in arr))
    for k, v in (std or {}).items():
        lines.append(f"{k}.std = {float(v)!r}")
    return "\n".join(lines) + "\n"


def read_params(path: str | Path) -> dict:
    """Parameter values from a file written by :func:`format_params` (``.std`` lines are skipped)."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read parameters: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'name = value'")
        k, v = (t.strip() for t in line.split("=", 1))
        if k.endswith(".std"):
            continue
        out[k] = _value(v, k)
    return out
