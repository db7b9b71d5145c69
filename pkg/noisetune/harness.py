"""
Experiment orchestration: method registry, training/evaluation runs and reports.

Training methods are registered into a :class:`MethodManager` by plugins. The built-in methods
("ours" and "leo") come from :func:`noisetune.register`; third-party packages can add their own
through the ``noisetune.methods`` entry-point group. Every method trains on its own split and
the test split is only loaded after training has finished.

Outputs of an experiment directory::

    report.csv            one row per (method, training-set size)
    trace_<method>.csv    per-iteration training trace
    theta_<method>.json   learned noise variances
"""

import csv
import json
import logging
import tomllib
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, fields, replace
from importlib.metadata import entry_points
from pathlib import Path

from .datagen import load_split, read_manifest, theta_star_from_manifest
from .errors import ConfigError, DataError, NoisetuneError, TrainingError, TrajectoryError
from .graph import NoiseParams
from .learner import TrainConfig, TrainTrace, train
from .leo import LEO_SCHEDULE, LeoConfig
from .leo import train_leo as _train_leo
from .metrics import mean_rmse
from .metrics import rmse as rmse
from .smoother import SmootherConfig, run_incremental

logger = logging.getLogger(__name__)

ENTRY_POINT_GROUP = "noisetune.methods"
REPORT_NAME = "report.csv"
SWEEP_SIZES = tuple(sorted(LEO_SCHEDULE))

Trainer = Callable[[Sequence, "ExperimentConfig", NoiseParams], tuple[NoiseParams, TrainTrace]]


# --- Method registry ---


@dataclass
class Method:
    name: str
    trainer: Trainer
    train_split: str
    description: str = ""


class MethodManager:
    """Collects training methods from registration hooks."""

    def __init__(self):
        self.methods: dict[str, Method] = {}
        self.dependencies: list[str] = []

    def add_method(self, name: str, trainer: Trainer, train_split: str = "train", description=""):
        if name in self.methods:
            logger.warning("method %r registered twice; keeping the latest", name)
        self.methods[name] = Method(name, trainer, train_split, description)

    def declare_dependency(self, name: str) -> None:
        self.dependencies.append(name)

    def get(self, name: str) -> Method:
        try:
            return self.methods[name]
        except KeyError:
            raise ConfigError(
                f"unknown method {name!r}; available: {', '.join(sorted(self.methods))}"
            ) from None

    def __contains__(self, name):
        return name in self.methods


def load_methods() -> MethodManager:
    """A manager populated by every ``noisetune.methods`` entry point."""
    manager = MethodManager()
    for ep in entry_points(group=ENTRY_POINT_GROUP):
        try:
            register = ep.load()
        except ImportError as e:
            logger.warning("cannot load method plugin %s: %s", ep.name, e)
            continue
        register(manager)
    if "ours" not in manager:
        # Source checkouts without installed metadata.
        from . import register

        register(manager)
    logger.debug("registered methods: %s", ", ".join(sorted(manager.methods)))
    return manager


# --- Configuration ---


def _sub_config(cls, table: dict, **extra):
    known = {f.name for f in fields(cls)}
    values = dict(table)
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} key(s): {', '.join(unknown)}")
    values.update(extra)
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


def _read_toml(path: Path) -> dict:
    try:
        return tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from e


def read_smoother_config(path) -> SmootherConfig:
    """The ``[smoother]`` table of an experiment file; other tables are not validated."""
    return _sub_config(SmootherConfig, _read_toml(Path(path)).get("smoother", {}))


@dataclass(frozen=True)
class ExperimentConfig:
    """Dataset, methods, training blocks and output directory of one experiment.

    ``theta0`` (flat variances) overrides the default start ``init_scale * theta_star``.
    ``leo_schedule`` takes LEO's sample and thread counts from the training-set-size schedule.
    """

    data: Path
    out: Path
    methods: tuple[str, ...] = ("ours", "leo")
    train: TrainConfig = field(default_factory=TrainConfig)
    leo: LeoConfig = field(default_factory=LeoConfig)
    init_scale: float = 10.0
    theta0: tuple[float, ...] | None = None
    n_train: int | None = None
    n_test: int | None = None
    test_split: str = "test"
    leo_schedule: bool = False

    def __post_init__(self):
        object.__setattr__(self, "data", Path(self.data))
        object.__setattr__(self, "out", Path(self.out))
        methods = (self.methods,) if isinstance(self.methods, str) else tuple(self.methods)
        if methods == ("both",):
            methods = ("ours", "leo")
        if not methods:
            raise ConfigError("no methods selected")
        object.__setattr__(self, "methods", methods)
        if not (self.data / "manifest.json").is_file():
            raise ConfigError(f"no dataset manifest under {self.data}")
        if not self.init_scale > 0:
            raise ConfigError(f"init_scale must be positive, got {self.init_scale}")
        for name, value in (("n_train", self.n_train), ("n_test", self.n_test)):
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be at least 1, got {value}")

    @classmethod
    def from_toml(cls, path, **overrides) -> "ExperimentConfig":
        """Read ``[experiment]``, ``[train]``, ``[leo]`` and ``[smoother]`` tables.

        Relative ``data``/``out`` paths resolve against the file's directory; keyword
        ``overrides`` (e.g. from the CLI) win over file values.
        """
        path = Path(path)
        return cls.from_mapping(_read_toml(path), base=path.parent, **overrides)

    @classmethod
    def from_mapping(cls, document: dict, base=Path("."), **overrides) -> "ExperimentConfig":
        smoother = _sub_config(SmootherConfig, document.get("smoother", {}))
        experiment = dict(document.get("experiment", {}))
        if "method" in experiment:
            experiment["methods"] = experiment.pop("method")
        for key in ("data", "out"):
            if key in experiment:
                experiment[key] = Path(base) / experiment[key]
        if "theta0" in experiment:
            experiment["theta0"] = tuple(float(v) for v in experiment["theta0"])
        experiment.update({k: v for k, v in overrides.items() if v is not None})
        experiment["train"] = _sub_config(TrainConfig, document.get("train", {}), smoother=smoother)
        experiment["leo"] = _sub_config(LeoConfig, document.get("leo", {}), smoother=smoother)
        for key in ("data", "out"):
            if key not in experiment:
                raise ConfigError(f"experiment needs a {key!r} entry")
        return _sub_config(cls, experiment)

    def initial_theta(self, theta_star: NoiseParams) -> NoiseParams:
        if self.theta0 is not None:
            return NoiseParams.from_vector(self.theta0, theta_star.gps_dim)
        return theta_star.scaled(self.init_scale)


# --- Built-in trainers ---


def train_ours(dataset, config: ExperimentConfig, theta0: NoiseParams):
    return train(dataset, config.train, theta0)


def train_leo(dataset, config: ExperimentConfig, theta0: NoiseParams):
    leo = config.leo
    if config.leo_schedule:
        leo = LeoConfig.scheduled(
            len(dataset),
            alpha=leo.alpha,
            iterations=leo.iterations,
            seed=leo.seed,
            max_relative_step=leo.max_relative_step,
            smoother=leo.smoother,
        )
    return _train_leo(dataset, leo, theta0)


# --- Reports ---


@dataclass
class ReportRow:
    method: str
    n_train: int
    len_train: int
    time_per_iter_s: float
    train_rmse_trans_m: float
    train_rmse_rot_rad: float
    test_rmse_trans_m: float
    test_rmse_rot_rad: float


REPORT_FIELDS = tuple(f.name for f in fields(ReportRow))


def write_report(rows: Sequence[ReportRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(REPORT_FIELDS)
        for row in rows:
            writer.writerow(
                [
                    row.method,
                    row.n_train,
                    row.len_train,
                    *(f"{getattr(row, name):.17g}" for name in REPORT_FIELDS[3:]),
                ]
            )
    return path


def read_report(path) -> list[ReportRow]:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if tuple(reader.fieldnames or ()) != REPORT_FIELDS:
                raise DataError("unexpected report header", path, 1)
            return [
                ReportRow(
                    r["method"],
                    int(r["n_train"]),
                    int(r["len_train"]),
                    *(float(r[name]) for name in REPORT_FIELDS[3:]),
                )
                for r in reader
            ]
    except OSError as e:
        raise DataError(f"cannot read report: {e}", path) from e


def write_theta(theta: NoiseParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"labels": theta.labels(), "values": theta.as_vector().tolist()}
    path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    return path


def read_theta(path) -> NoiseParams:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read theta file: {e}", path) from e
    except json.JSONDecodeError as e:
        raise DataError(f"invalid theta JSON: {e}", path, e.lineno) from e
    try:
        labels, values = document["labels"], document["values"]
    except (KeyError, TypeError):
        raise DataError("theta file needs 'labels' and 'values'", path) from None
    if len(labels) != len(values):
        raise DataError("theta labels and values differ in length", path)
    gps_dim = sum(1 for label in labels if label.startswith("theta_gps"))
    return NoiseParams.from_vector(values, gps_dim)


# --- Evaluation ---


def evaluate(
    theta: NoiseParams, trajectories: Sequence, smoother: SmootherConfig | None = None
) -> tuple[float, float]:
    """Average per-trajectory ``(translation, rotation)`` RMSE of the smoother run at ``theta``."""
    if not trajectories:
        raise ConfigError("no trajectories to evaluate")
    pairs = []
    for j, trajectory in enumerate(trajectories):
        try:
            run = run_incremental(trajectory, theta, smoother)
        except NoisetuneError as e:
            if isinstance(e, ConfigError):
                raise
            raise TrajectoryError(j, e) from e
        pairs.append((run.estimate, trajectory.gt_poses))
    return mean_rmse(pairs)


@dataclass
class ExperimentResult:
    rows: list[ReportRow] = field(default_factory=list)
    traces: dict[str, TrainTrace] = field(default_factory=dict)
    thetas: dict[str, NoiseParams] = field(default_factory=dict)


def _run_method(
    method: Method,
    config: ExperimentConfig,
    n_train: int | None,
    result: ExperimentResult,
    tag: str,
    with_test: bool = True,
) -> ReportRow | None:
    dataset = load_split(config.data, method.train_split, n_train)
    theta0 = config.initial_theta(theta_star_from_manifest(config.data))
    logger.info("%s: training on %d %s trajectories", tag, len(dataset), method.train_split)
    try:
        theta, trace = method.trainer(dataset, config, theta0)
    except TrainingError as e:
        if e.trace is not None:
            result.traces[tag] = e.trace
        if e.theta is not None:
            result.thetas[tag] = e.theta
        raise
    result.traces[tag] = trace
    result.thetas[tag] = theta
    if not with_test:
        return None

    smoother = config.train.smoother
    train_trans, train_rot = evaluate(theta, dataset, smoother)
    # Test data is read only once training is over.
    test = load_split(config.data, config.test_split, config.n_test)
    test_trans, test_rot = evaluate(theta, test, smoother)
    row = ReportRow(
        method.name,
        len(dataset),
        len(dataset[0]),
        trace.mean_iteration_time(),
        train_trans,
        train_rot,
        test_trans,
        test_rot,
    )
    result.rows.append(row)
    logger.info(
        "%s: test RMSE %.4f m / %.4f rad, %.4f s per iteration",
        tag,
        test_trans,
        test_rot,
        row.time_per_iter_s,
    )
    return row


def flush(result: ExperimentResult, out: Path, report: bool = True) -> None:
    """Write every row, trace and theta collected so far."""
    out.mkdir(parents=True, exist_ok=True)
    if report:
        write_report(result.rows, out / REPORT_NAME)
    for tag, trace in result.traces.items():
        trace.write_csv(out / f"trace_{tag}.csv")
    for tag, theta in result.thetas.items():
        write_theta(theta, out / f"theta_{tag}.json")


def _run(
    config: ExperimentConfig, plan, manager: MethodManager | None, with_test: bool = True
) -> ExperimentResult:
    manager = manager or load_methods()
    methods = [manager.get(name) for name in config.methods]
    read_manifest(config.data)
    result = ExperimentResult()
    try:
        for method, n_train, tag in plan(methods):
            _run_method(method, config, n_train, result, tag, with_test)
    except NoisetuneError:
        logger.warning("experiment failed; flushing partial results to %s", config.out)
        flush(result, config.out, with_test)
        raise
    flush(result, config.out, with_test)
    return result


def run_experiment(config: ExperimentConfig, manager: MethodManager | None = None) -> ExperimentResult:
    """Train and test every configured method; writes the report, traces and thetas to ``out``."""
    return _run(config, lambda methods: [(m, config.n_train, m.name) for m in methods], manager)


def run_training(config: ExperimentConfig, manager: MethodManager | None = None) -> ExperimentResult:
    """Train every configured method without touching the test split; writes traces and thetas."""
    return _run(
        config,
        lambda methods: [(m, config.n_train, m.name) for m in methods],
        manager,
        with_test=False,
    )


def run_sweep(
    config: ExperimentConfig,
    sizes: Sequence[int] = SWEEP_SIZES,
    manager: MethodManager | None = None,
) -> ExperimentResult:
    """One report row per (method, training-set size); LEO follows the size schedule."""
    sizes = [int(s) for s in sizes]
    if not sizes or min(sizes) < 1:
        raise ConfigError(f"sweep sizes must be >= 1, got {sizes}")
    config = replace(config, leo_schedule=True)

    def plan(methods):
        return [(m, size, f"{m.name}_n{size}") for m in methods for size in sizes]

    return _run(config, plan, manager)


__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "MethodManager",
    "ReportRow",
    "evaluate",
    "load_methods",
    "read_report",
    "read_smoother_config",
    "read_theta",
    "rmse",
    "run_experiment",
    "run_sweep",
    "run_training",
    "write_report",
    "write_theta",
]
