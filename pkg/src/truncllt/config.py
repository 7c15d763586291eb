"""Run configuration: TOML with dotted keys, validated by a pydantic schema.

See ``docs/config.md`` for the grammar and every key.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .decomp import BallSpec, MixtureDecomposition, NuSpec, standard_decompositions
from .estimator import Ensemble
from .model import CATALOG, ModelCatalogEntry, catalog_entry, custom_model

EXIT_ACCEPTANCE = 1
EXIT_SCHEMA = 2
EXIT_UNREADABLE = 3

Number = Union[float, int]
Vector = Union[Number, list[Number]]


class ConfigError(ValueError):
    """Schema violations; ``problems`` lists every one found."""

    exit_code = EXIT_SCHEMA

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


class ConfigReadError(OSError):
    exit_code = EXIT_UNREADABLE


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    name: Optional[Literal["iid", "constant", "ou_bounded", "trig", "custom"]] = None
    dim: int = Field(1, ge=1, le=8)
    a0: Optional[Vector] = None
    b0: Optional[Union[Number, list[Number], list[list[Number]]]] = None
    lam: Optional[float] = None
    drift: Optional[list[str]] = None
    diffusion: Optional[list[list[str]]] = None
    gamma: Optional[float] = Field(None, gt=0)


class BallSection(_Section):
    center: Vector = 0.0
    radius: float = Field(..., gt=0)


class NuSection(_Section):
    kind: Literal["none", "point", "uniform", "pareto", "sphere"] = "none"
    params: dict[str, Vector] = Field(default_factory=dict)


class DecompSection(_Section):
    preset: Optional[Literal["uniform", "heavy", "matched"]] = None
    alpha: Optional[float] = Field(None, gt=0, le=1)
    ball: Optional[BallSection] = None
    nu: Optional[NuSection] = None
    kappa: Optional[int] = None
    exp_moment: Optional[bool] = None
    theta_delta: Optional[float] = Field(None, gt=0)


class SchemeSection(_Section):
    n: int = Field(64, ge=1)
    t: float = Field(1.0, gt=0, le=1)
    x0: Vector = 0.0
    paths: int = Field(100_000, ge=1)
    c: Optional[float] = Field(None, gt=0)
    p: Optional[int] = Field(None, ge=1)
    chunk: int = Field(8192, ge=1)


class GridSection(_Section):
    start: float
    stop: float
    step: float = Field(..., gt=0)


class EstimatorSection(_Section):
    y: Optional[list[Vector]] = None
    grid: Optional[GridSection] = None
    orthant: Union[Literal["auto"], list[int]] = "auto"
    pilot: int = Field(2000, ge=100)
    method: Literal["auto", "affine", "dense"] = "auto"
    coordinate: int = Field(0, ge=0)
    levels: Optional[list[float]] = None
    lambdas: Optional[list[Vector]] = None


class ExperimentSection(_Section):
    n_ladder: list[int] = Field(default_factory=lambda: [16, 64, 256])
    t_grid: list[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0])
    x_prime: Optional[Vector] = None
    offsets: list[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    wmeasure: Literal["delta_bump", "lebesgue_box"] = "delta_bump"
    half_width: float = Field(1.0, gt=0)
    delta_ladder: list[float] = Field(default_factory=lambda: [0.5, 0.25, 0.1, 0.05, 0.02])
    identity_samples: int = Field(1000, ge=10)
    duality_samples: int = Field(100_000, ge=100)


class RunConfig(_Section):
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    output: str = "out"
    model: ModelSection = Field(default_factory=ModelSection)
    decomp: DecompSection = Field(default_factory=DecompSection)
    scheme: SchemeSection = Field(default_factory=SchemeSection)
    estimator: EstimatorSection = Field(default_factory=EstimatorSection)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)

    @model_validator(mode="after")
    def _cross_checks(self):
        problems = cross_field_problems(self)
        if problems:
            raise ValueError("; ".join(problems))
        return self


def _length(value) -> int | None:
    return len(value) if isinstance(value, list) else None


def cross_field_problems(cfg: RunConfig) -> list[str]:
    problems = []
    m, dc, sc = cfg.model, cfg.decomp, cfg.scheme
    d = m.dim
    if m.name is None:
        problems.append("model.name is required (one of iid, constant, ou_bounded, trig, custom)")
    if m.name == "custom":
        if not m.drift or not m.diffusion:
            problems.append("model.name = custom needs model.drift and model.diffusion")
        elif len(m.drift) != d or len(m.diffusion) != d or any(len(row) != d for row in m.diffusion):
            problems.append(f"custom drift must have {d} entries and diffusion must be {d}x{d}")
    elif m.drift is not None or m.diffusion is not None:
        problems.append("model.drift / model.diffusion are only allowed with model.name = custom")
    for key in ("x0",):
        n_x = _length(getattr(sc, key))
        if n_x is not None and n_x != d:
            problems.append(f"scheme.{key} has {n_x} entries but model.dim = {d}")
    explicit = any(v is not None for v in (dc.alpha, dc.ball, dc.nu))
    if dc.preset is not None and explicit:
        problems.append("decomp.preset excludes decomp.alpha, decomp.ball and decomp.nu")
    alpha = dc.alpha if dc.alpha is not None else (
        {"heavy": 0.5, "matched": 0.95}.get(dc.preset, 1.0))
    if dc.kappa is not None and dc.kappa < 4:
        problems.append(f"decomp.kappa = {dc.kappa}: the moment index must be an integer >= 4")
    if dc.ball is not None and _length(dc.ball.center) not in (None, d):
        problems.append(f"decomp.ball.center has {_length(dc.ball.center)} entries but model.dim = {d}")
    if dc.preset is None and alpha < 1 and (dc.nu is None or dc.nu.kind == "none"):
        problems.append("decomp.alpha < 1 requires decomp.nu.kind other than none")
    if sc.c is not None and not (0 < sc.c < alpha):
        problems.append(f"scheme.c = {sc.c} must lie in (0, alpha) = (0, {alpha})")
    est = cfg.estimator
    if est.y is not None and est.grid is not None:
        problems.append("give either estimator.y or estimator.grid, not both")
    if est.y is not None and any(_length(v) not in (None, d) if d > 1 else _length(v) not in (None, 1)
                                 for v in est.y):
        problems.append(f"every estimator.y point needs {d} coordinates")
    if est.grid is not None and est.grid.stop < est.grid.start:
        problems.append("estimator.grid.stop must be >= estimator.grid.start")
    if isinstance(est.orthant, list) and (len(est.orthant) != d or any(a not in (0, 1) for a in est.orthant)):
        problems.append(f"estimator.orthant must be 'auto' or {d} entries in {{0, 1}}")
    if est.coordinate >= d:
        problems.append(f"estimator.coordinate must be < model.dim = {d}")
    if cfg.experiment.x_prime is not None and _length(cfg.experiment.x_prime) not in (None, d):
        problems.append(f"experiment.x_prime needs {d} coordinates")
    return problems


def _flatten_errors(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"])
        msg = e["msg"].removeprefix("Value error, ")
        if e["type"] == "extra_forbidden":
            msg = "unknown key"
        out.extend(f"{loc}: {m}" if loc else m for m in msg.split("; "))
    return out


def parse_config(source: str | Path, text: str | None = None) -> RunConfig:
    """Parse a config file, or inline ``text`` when given; raises ConfigError listing all violations."""
    if text is None:
        try:
            text = Path(source).read_text()
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigReadError(f"cannot read config {source}: {exc}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    return validate_config(raw)


def validate_config(raw: dict) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        problems = _flatten_errors(exc)
        # field errors stop pydantic before the cross-field pass; run it on whatever parses
        try:
            extra = cross_field_problems(_lenient(raw))
        except (TypeError, ValueError, AttributeError):
            extra = []
        problems += [p for p in extra if p not in problems]
        raise ConfigError(problems) from None
    return cfg


def _lenient(raw: dict) -> RunConfig:
    """Best-effort object for cross-field checks when some fields failed validation."""
    sections = {"model": ModelSection, "decomp": DecompSection, "scheme": SchemeSection,
                "estimator": EstimatorSection, "experiment": ExperimentSection}
    built = {}
    for key, cls in sections.items():
        try:
            built[key] = cls.model_validate(raw.get(key, {}))
        except ValidationError:
            built[key] = cls.model_construct(**{f: v for f, v in raw.get(key, {}).items()
                                                if f in cls.model_fields})
            for name, info in cls.model_fields.items():
                if name not in raw.get(key, {}) and not info.is_required():
                    setattr(built[key], name, info.get_default(call_default_factory=True))
    return RunConfig.model_construct(**built)


def apply_overrides(raw: dict, assignments: list[str]) -> dict:
    """Apply ``dotted.key=value`` strings (values parsed as TOML, falling back to strings)."""
    out = json.loads(json.dumps(raw))
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError([f"override {item!r} must look like key=value"])
        try:
            parsed = tomllib.loads(f"v = {value}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = value
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = parsed
    return out


def load_raw(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigReadError(f"cannot read config {path}: {exc}") from exc
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def content_hash(obj) -> str:
    """Git-style blob hash of the canonical JSON encoding."""
    body = canonical_json(obj).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# -- builders -------------------------------------------------------------------

def build_model(cfg: RunConfig) -> ModelCatalogEntry:
    m = cfg.model
    if m.name == "custom":
        spec = custom_model(m.drift, m.diffusion, gamma=m.gamma)
        return ModelCatalogEntry("custom", spec)
    params = {k: v for k, v in (("a0", m.a0), ("b0", m.b0), ("lam", m.lam)) if v is not None}
    if m.name not in CATALOG:
        raise ConfigError([f"model.name {m.name!r} is not in the catalog"])
    return catalog_entry(m.name, m.dim, **params)


def build_decomp(cfg: RunConfig) -> MixtureDecomposition:
    dc, d = cfg.decomp, cfg.model.dim
    if dc.preset is not None:
        base = standard_decompositions(d)[dc.preset]
        return MixtureDecomposition(base.alpha, base.ball, base.nu,
                                    dc.kappa if dc.kappa is not None else base.kappa,
                                    dc.exp_moment if dc.exp_moment is not None else base.exp_moment,
                                    dc.theta_delta if dc.theta_delta is not None else base.theta_delta)
    alpha = 1.0 if dc.alpha is None else dc.alpha
    if dc.ball is None:
        ball = BallSpec(np.zeros(d), math.sqrt(3.0) if d == 1 else math.sqrt(d + 2.0))
    else:
        ball = BallSpec(np.broadcast_to(np.asarray(dc.ball.center, dtype=float), (d,)).copy(), dc.ball.radius)
    nu = NuSpec() if dc.nu is None else NuSpec(dc.nu.kind, dict(dc.nu.params))
    return MixtureDecomposition(alpha, ball, nu, dc.kappa if dc.kappa is not None else 4,
                                bool(dc.exp_moment), dc.theta_delta if dc.theta_delta is not None else 1.0)


def build_ensemble(cfg: RunConfig, entry: ModelCatalogEntry | None = None,
                   decomp: MixtureDecomposition | None = None) -> Ensemble:
    entry = build_model(cfg) if entry is None else entry
    decomp = build_decomp(cfg) if decomp is None else decomp
    sc = cfg.scheme
    return Ensemble(entry.spec, decomp, np.asarray(sc.x0, dtype=float), sc.n, sc.t, sc.paths, sc.c, sc.p,
                    cfg.seed, cfg.workers, sc.chunk, cfg.estimator.method, cfg.estimator.pilot)


def evaluation_points(cfg: RunConfig) -> np.ndarray:
    d = cfg.model.dim
    est = cfg.estimator
    if est.y is not None:
        return np.asarray(est.y, dtype=float).reshape(-1, d)
    if est.grid is not None:
        g = est.grid
        axis = np.arange(g.start, g.stop + 0.5 * g.step, g.step)
        mesh = np.meshgrid(*([axis] * d), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)
    axis = np.arange(-3.0, 3.0 + 1e-9, 0.5)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1) + np.asarray(cfg.scheme.x0, dtype=float)
