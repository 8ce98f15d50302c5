import ast
import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from sparsedag._compat import StrEnum
from pathlib import Path
from typing import Any, Optional

import numpy as np
from lark import Lark, ParseTree, Transformer
from lark.exceptions import UnexpectedInput, VisitError

from sparsedag.constraints import ConstraintKind, ConstraintSpec
from sparsedag.optim import AdamParams, OptimConfig
from sparsedag.sem import GraphSpec

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORKERS_ENV = "SPARSEDAG_WORKERS"


class ConfigError(ValueError):
    """A configuration problem, located by the dotted key path (or file) at fault."""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ConfigParser:
    """Parser for experiment configuration files and `--set` values.

    Note:
        Don't instantiate directly: use the global config_parser instance.
    """

    def __init__(self):
        self._parser = Lark.open(
            str(Path(__file__).parent / "config.lark"),
            rel_to=__file__,
            parser="lalr",
            start=["document", "value"],
            propagate_positions=False,
            maybe_placeholders=False,
        )

    def parse(self, text: str, start: str = "document") -> ParseTree:
        return self._parser.parse(text, start=start)


config_parser = ConfigParser()


def _insert(mapping: dict, key: tuple[str, ...], value: Any) -> None:
    """Set a dotted key, merging sections and refusing duplicate leaves."""
    *parents, leaf = key
    target = mapping
    for depth, part in enumerate(parents):
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigError("is not a section", ".".join(key[: depth + 1]))
    if leaf in target:
        if isinstance(target[leaf], dict) and isinstance(value, dict):
            for k, v in value.items():
                _insert(target[leaf], (k,), v)
            return
        raise ConfigError("duplicate key", ".".join(key))
    target[leaf] = value


class TreeToMapping(Transformer):
    """Transforms a parsed configuration into nested dicts of plain values."""

    def number(self, children):
        text = str(children[0])
        if any(c in text for c in ".eE"):
            return float(text)
        return int(text)

    def string(self, children):
        return ast.literal_eval(str(children[0]))

    def name(self, children):
        match str(children[0]):
            case "true":
                return True
            case "false":
                return False
            case other:
                return other

    def list(self, children):
        return list(children)

    def key(self, children):
        return tuple(str(c) for c in children)

    def assignment(self, children):
        return children[0], children[1]

    def section(self, children):
        return children[0], children[1]

    def block(self, children):
        out: dict = {}
        for key, value in children:
            _insert(out, key, value)
        return out

    document = block


def parse_config_text(text: str, source: Optional[str] = None) -> dict:
    """Parse configuration text into nested dicts.

    Raises:
        ConfigError: On syntax errors (located by line and column) and
            duplicate keys.
    """
    try:
        tree = config_parser.parse(text)
    except UnexpectedInput as e:
        raise ConfigError(f"syntax error at line {e.line}, column {e.column}", source) from e
    try:
        return TreeToMapping().transform(tree)
    except VisitError as e:
        if isinstance(e.orig_exc, ConfigError):
            raise e.orig_exc from None
        raise


def parse_value(text: str) -> Any:
    try:
        tree = config_parser.parse(text, start="value")
    except UnexpectedInput as e:
        raise ConfigError(f"can't parse value {text!r}") from e
    try:
        return TreeToMapping().transform(tree)
    except VisitError as e:
        if isinstance(e.orig_exc, ConfigError):
            raise e.orig_exc from None
        raise


def apply_override(mapping: dict, assignment: str) -> None:
    """Apply a `dotted.path=value` override in place."""
    path, sep, text = assignment.partition("=")
    path = path.strip()
    if not sep or not path:
        raise ConfigError(f"override {assignment!r} must look like dotted.path=value")
    key = tuple(path.split("."))
    value = parse_value(text.strip())
    target = mapping
    for depth, part in enumerate(key[:-1]):
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigError("is not a section", ".".join(key[: depth + 1]))
    target[key[-1]] = value


class ExperimentKind(StrEnum):
    GRAD_VS_RHO = "GradVsRho"
    GRAD_VS_MAGNITUDE = "GradVsMagnitude"
    L1_SYNERGY = "L1Synergy"
    SPARSE_BENCHMARK = "SparseBenchmark"
    NEAR_CYCLIC = "NearCyclic"
    DELTA_SENSITIVITY = "DeltaSensitivity"
    LAMBDA_TRAJECTORY = "LambdaTrajectory"
    SCALABILITY = "Scalability"
    FIT_CSV = "FitCsv"

    @property
    def is_gradient_sweep(self) -> bool:
        return self in (
            ExperimentKind.GRAD_VS_RHO,
            ExperimentKind.GRAD_VS_MAGNITUDE,
            ExperimentKind.L1_SYNERGY,
        )


@dataclass(frozen=True)
class DataSource:
    """Where samples come from: the synthetic SEM or a CSV file."""

    n: int = 1000
    noise_std: float = 1.0
    path: Optional[Path] = None
    truth_path: Optional[Path] = None
    has_header: bool = True
    center: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be positive, got {self.n}")
        if not self.noise_std > 0:
            raise ValueError(f"noise_std must be positive, got {self.noise_std}")


@dataclass(frozen=True)
class MethodSpec:
    """A named solver/constraint pairing compared by the benchmarks."""

    name: str
    solver: str
    constraint: ConstraintSpec
    subgradient: bool = False

    def __post_init__(self):
        if self.solver not in ("spg", "adam"):
            raise ValueError(f"solver must be spg or adam, got {self.solver!r}")


def default_rho_values() -> list[float]:
    return [float(r) for r in 1 - np.geomspace(0.5, 1e-4, 20)]


def default_t_values() -> list[float]:
    return [float(t) for t in np.geomspace(1e-6, 1.0, 20)]


@dataclass(frozen=True)
class Sweep:
    t_values: list[float] = field(default_factory=default_t_values)
    rho_values: list[float] = field(default_factory=default_rho_values)
    delta_values: list[float] = field(default_factory=lambda: [1e-10, 1e-7, 1e-4, 1e-2])
    lambda_values: list[float] = field(default_factory=lambda: [0.1, 0.5, 1.0])
    d_values: list[int] = field(default_factory=lambda: [50, 100, 200, 500])

    def __post_init__(self):
        for name in ("t_values", "rho_values", "delta_values", "lambda_values", "d_values"):
            values = getattr(self, name)
            if not values:
                raise ValueError(f"{name} must not be empty")
        if any(not 0 < r < 1 for r in self.rho_values):
            raise ValueError("rho_values must lie in (0, 1)")
        if any(t <= 0 for t in self.t_values):
            raise ValueError("t_values must be positive")


def default_constraints() -> list[ConstraintSpec]:
    return [
        ConstraintSpec(ConstraintKind.EXP),
        ConstraintSpec(ConstraintKind.LOGDET),
        ConstraintSpec(ConstraintKind.AAC),
        ConstraintSpec(ConstraintKind.SMOOTHED_AHOC, delta=1e-8),
    ]


def default_methods() -> list[MethodSpec]:
    return [
        MethodSpec("spg-ahoc", "spg", ConstraintSpec(ConstraintKind.SMOOTHED_AHOC)),
        MethodSpec("adam-exp", "adam", ConstraintSpec(ConstraintKind.EXP)),
    ]


@dataclass
class ExperimentConfig:
    """A validated experiment configuration.

    Attributes:
        experiment: Protocol to run.
        seeds: Replication seeds.
        graph: Synthetic graph shape; its seed is replaced per replication.
        data: Sample source.
        optim: SPG/ALM settings.
        adam: Adam baseline settings.
        constraints: Constraints compared by gradient sweeps.
        methods: Solvers compared by optimization experiments.
        sweep: Grids of the sweep experiments.
        tau: Threshold applied to estimates before structural scoring.
        workers: Worker count, or None to use the environment default.
        output_dir: Directory receiving the reports.
        source: File the configuration was read from.
        raw: The parsed mapping after overrides, echoed into the manifest.
    """

    experiment: ExperimentKind
    seeds: list[int]
    graph: GraphSpec = field(default_factory=lambda: GraphSpec(50, 50))
    data: DataSource = field(default_factory=DataSource)
    optim: OptimConfig = field(default_factory=OptimConfig)
    adam: AdamParams = field(default_factory=AdamParams)
    constraints: list[ConstraintSpec] = field(default_factory=default_constraints)
    methods: list[MethodSpec] = field(default_factory=default_methods)
    sweep: Sweep = field(default_factory=Sweep)
    tau: float = 0.3
    workers: Optional[int] = None
    output_dir: Path = Path("results")
    source: Optional[Path] = None
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("must not be empty", "seeds")
        if self.tau < 0:
            raise ConfigError("must be nonnegative", "tau")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("must be positive", "workers")
        if self.experiment == ExperimentKind.FIT_CSV and self.data.path is None:
            raise ConfigError("FitCsv needs a data file", "data.path")

    @classmethod
    def read(cls, path: str | Path, overrides: tuple[str, ...] = ()) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"can't read config file ({e.strerror})", str(path)) from e
        return cls.from_text(text, overrides, source=path)

    @classmethod
    def from_text(
        cls,
        text: str,
        overrides: tuple[str, ...] = (),
        source: Optional[Path] = None,
    ) -> "ExperimentConfig":
        mapping = parse_config_text(text, None if source is None else str(source))
        for assignment in overrides:
            apply_override(mapping, assignment)
        return cls.from_mapping(mapping, source)

    @classmethod
    def from_mapping(cls, mapping: Mapping, source: Optional[Path] = None) -> "ExperimentConfig":
        reader = _Section(dict(mapping), "")
        version = reader.take("schema_version", int)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"must be {SCHEMA_VERSION}, got {version}", "schema_version")
        experiment = reader.take("experiment", str)
        try:
            kind = ExperimentKind(experiment)
        except ValueError:
            choices = ", ".join(k.value for k in ExperimentKind)
            raise ConfigError(f"unknown experiment {experiment!r} (one of {choices})", "experiment")
        seeds = [int(s) for s in reader.take_list("seeds", int)]

        kwargs: dict[str, Any] = {}
        if (graph := reader.section("graph")) is not None:
            kwargs["graph"] = graph.build(
                GraphSpec,
                d=int,
                num_edges=int,
                weight_low=float,
                weight_high=float,
                required=("d",),
                defaults=lambda given: {"num_edges": given["d"]},
            )
        if (data := reader.section("data")) is not None:
            kwargs["data"] = data.build(
                DataSource,
                n=int,
                noise_std=float,
                path=Path,
                truth_path=Path,
                has_header=bool,
                center=bool,
            )
        if (optim := reader.section("optim")) is not None:
            kwargs["optim"] = optim.build(
                OptimConfig,
                lambda1=float,
                eta_init=float,
                ls_shrink=float,
                ls_max=int,
                inner_tol=float,
                inner_ftol=float,
                inner_max=int,
                mu0=float,
                rho0=float,
                rho_growth=float,
                h_progress=float,
                h_tol=float,
                outer_max=int,
                rho_max=float,
                snap_radius=float,
                subgradient=bool,
            )
        if (adam := reader.section("adam")) is not None:
            kwargs["adam"] = adam.build(
                AdamParams,
                lr=float,
                beta1=float,
                beta2=float,
                eps=float,
                steps=int,
                record_every=int,
            )
        if "constraints" in reader.mapping:
            kwargs["constraints"] = [
                _constraint_spec(_Section(m, f"constraints[{i}]"))
                for i, m in enumerate(reader.take_list("constraints", dict))
            ]
        if "methods" in reader.mapping:
            kwargs["methods"] = [
                _method_spec(_Section(m, f"methods[{i}]"))
                for i, m in enumerate(reader.take_list("methods", dict))
            ]
        if (sweep := reader.section("sweep")) is not None:
            kwargs["sweep"] = sweep.build(
                Sweep,
                t_values=list[float],
                rho_values=list[float],
                delta_values=list[float],
                lambda_values=list[float],
                d_values=list[int],
            )
        if "tau" in reader.mapping:
            kwargs["tau"] = reader.take("tau", float)
        if "workers" in reader.mapping:
            kwargs["workers"] = reader.take("workers", int)
        if "output_dir" in reader.mapping:
            kwargs["output_dir"] = Path(reader.take("output_dir", str))
        reader.finish()

        if kind == ExperimentKind.FIT_CSV and "data" not in kwargs:
            raise ConfigError("FitCsv needs a data file", "data.path")
        return cls(kind, seeds, source=source, raw=dict(mapping), **kwargs)

    def resolve_workers(self, cli_workers: Optional[int] = None) -> int:
        """CLI flag, then the `workers` key, then the environment, then 1."""
        if cli_workers is not None:
            if cli_workers < 1:
                raise ConfigError("must be positive", "--workers")
            return cli_workers
        if self.workers is not None:
            return self.workers
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                value = int(env)
            except ValueError:
                raise ConfigError(f"must be an integer, got {env!r}", WORKERS_ENV)
            if value < 1:
                raise ConfigError("must be positive", WORKERS_ENV)
            return value
        return 1


def _type_name(kind: Any) -> str:
    return getattr(kind, "__name__", str(kind))


def _coerce(value: Any, kind: Any, path: str) -> Any:
    """Check a parsed value against the expected type, widening ints to floats."""
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true or false, got {value!r}", path)
        return value
    if kind is str or kind is Path:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string or name, got {value!r}", path)
        return kind(value)
    if kind is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"expected a block, got {value!r}", path)
        return value
    if getattr(kind, "__origin__", None) is list:
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", path)
        (inner,) = kind.__args__
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    raise TypeError(f"Unsupported config type {_type_name(kind)}")


class _Section:
    """Consumes keys from one mapping, tracking the dotted path for errors."""

    def __init__(self, mapping: dict, path: str):
        self.mapping = dict(mapping)
        self.path = path

    def _key_path(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def take(self, key: str, kind: Any) -> Any:
        if key not in self.mapping:
            raise ConfigError("missing required key", self._key_path(key))
        return _coerce(self.mapping.pop(key), kind, self._key_path(key))

    def take_list(self, key: str, inner: Any) -> list:
        return self.take(key, list[inner])

    def section(self, key: str) -> Optional["_Section"]:
        if key not in self.mapping:
            return None
        return _Section(self.take(key, dict), self._key_path(key))

    def finish(self) -> None:
        if self.mapping:
            unknown = sorted(self.mapping)[0]
            raise ConfigError("unknown key", self._key_path(unknown))

    def build(self, cls, required=(), defaults=None, **fields):
        given = {}
        for key in required:
            given[key] = self.take(key, fields[key])
        for key, kind in fields.items():
            if key in self.mapping:
                given[key] = self.take(key, kind)
        self.finish()
        if defaults is not None:
            for key, value in defaults(given).items():
                given.setdefault(key, value)
        try:
            return cls(**given)
        except ValueError as e:
            raise ConfigError(str(e), self.path) from e


def _constraint_spec(section: _Section) -> ConstraintSpec:
    kind = section.take("kind", str)
    try:
        kind = ConstraintKind(kind)
    except ValueError:
        choices = ", ".join(k.value for k in ConstraintKind)
        raise ConfigError(f"unknown constraint {kind!r} (one of {choices})", section._key_path("kind"))
    return section.build(
        lambda **kw: ConstraintSpec(kind, **kw),
        alpha=float,
        epsilon=float,
        delta=float,
        s=float,
    )


def _method_spec(section: _Section) -> MethodSpec:
    name = section.take("name", str)
    solver = section.take("solver", str) if "solver" in section.mapping else "spg"
    subgradient = section.take("subgradient", bool) if "subgradient" in section.mapping else False
    constraint_section = section.section("constraint")
    if constraint_section is None:
        raise ConfigError("missing required key", section._key_path("constraint"))
    constraint = _constraint_spec(constraint_section)
    section.finish()
    try:
        return MethodSpec(name, solver, constraint, subgradient)
    except ValueError as e:
        raise ConfigError(str(e), section.path) from e
