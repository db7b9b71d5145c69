"""
Synthetic SE(2) navigation data: ground-truth trajectories, noise injection and datasets.

Every trajectory draws from its own RNG streams, derived from ``(seed, split, index, purpose)``
with ``numpy.random.SeedSequence``; adding trajectories or splits never changes existing ones.

Dataset layout on disk::

    <root>/manifest.json
    <root>/<split>/traj_000.jsonl
    ...

Trajectory files are JSON lines with ``pose_gt``, ``gps`` and ``odom`` records.
"""

import json
import logging
import zlib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .graph import GPS_MODES, NoiseParams
from .liegroup import Pose2, compose, exp, inverse
from .presets import load_preset

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DEFAULT_SPLITS = {"train": (5, 100), "train_long": (5, 300), "test": (20, 300)}

_MOTION_STREAM = 0
_GPS_STREAM = 1
_ODOM_STREAM = 2


@dataclass(frozen=True)
class GenConfig:
    length: int
    n_traj: int
    theta_star_gps: tuple[float, ...]
    theta_star_odom: tuple[float, float, float]
    step_length: float = 1.0
    heading_std: float = 0.1
    seed: int = 0
    gps_mode: str = "position2"
    stream: int = 0  # split identifier mixed into every RNG stream

    def __post_init__(self):
        object.__setattr__(self, "theta_star_gps", tuple(float(v) for v in self.theta_star_gps))
        object.__setattr__(self, "theta_star_odom", tuple(float(v) for v in self.theta_star_odom))
        if self.length < 2:
            raise ConfigError(f"trajectory length must be >= 2, got {self.length}")
        if self.n_traj < 0:
            raise ConfigError(f"n_traj must be >= 0, got {self.n_traj}")
        if self.gps_mode not in GPS_MODES:
            raise ConfigError(f"unknown gps_mode {self.gps_mode!r}")
        expected = 2 if self.gps_mode == "position2" else 3
        if len(self.theta_star_gps) != expected or len(self.theta_star_odom) != 3:
            raise ConfigError("theta_star sizes do not match the gps mode")
        if min(self.theta_star_gps + self.theta_star_odom) <= 0:
            raise ConfigError("generating variances must be > 0")
        if self.step_length <= 0:
            raise ConfigError(f"step_length must be > 0, got {self.step_length}")
        if self.heading_std < 0:
            raise ConfigError(f"heading_std must be >= 0, got {self.heading_std}")

    @property
    def theta_star(self) -> NoiseParams:
        return NoiseParams(self.theta_star_gps, self.theta_star_odom)


@dataclass(eq=False)
class Trajectory:
    gt_poses: list[Pose2]
    gps_measurements: np.ndarray  # (T, 2), or (T, 3) poses in pose3 mode
    odom_measurements: list[Pose2]  # T - 1 relative poses
    gps_mode: str = "position2"
    source: Path | None = field(default=None, repr=False)

    def __post_init__(self):
        self.gps_measurements = np.asarray(self.gps_measurements, dtype=float)
        if len(self.gps_measurements) != len(self.gt_poses):
            raise DataError("gps count does not match pose count", self.source)
        if len(self.odom_measurements) != len(self.gt_poses) - 1:
            raise DataError("odometry count must be pose count - 1", self.source)

    def __len__(self):
        return len(self.gt_poses)


def _rng(seed: int, stream: int, index: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index, purpose)))


def split_stream(name: str) -> int:
    """Stable integer id of a split name."""
    return zlib.crc32(name.encode("utf-8"))


# --- Generation ---


def generate_gt(config: GenConfig, index: int = 0) -> list[Pose2]:
    """Random-heading walk: pose_0 = identity, then ``step_length`` forward per step."""
    rng = _rng(config.seed, config.stream, index, _MOTION_STREAM)
    turns = rng.normal(0.0, config.heading_std, size=config.length - 1)
    poses = [Pose2.identity()]
    for turn in turns:
        poses.append(compose(poses[-1], Pose2(config.step_length, 0.0, float(turn))))
    return poses


def simulate_measurements(
    gt_poses: Sequence[Pose2],
    theta_star: NoiseParams | tuple,
    seed: int | np.random.Generator | tuple = 0,
    gps_mode: str = "position2",
) -> Trajectory:
    """Noisy GPS and odometry for ``gt_poses``.

    ``theta_star`` is a ``NoiseParams`` or a raw ``(gps, odom)`` pair; raw zeros give exact
    measurements. GPS noise is additive on position (left-perturbed pose in pose3 mode);
    odometry noise is injected in the tangent space: ``z = Exp(eta) o (gt_{i-1}^-1 o gt_i)``.
    """
    if isinstance(theta_star, NoiseParams):
        gps_var, odom_var = theta_star.gps, theta_star.odom
    else:
        gps_var, odom_var = (np.asarray(v, dtype=float) for v in theta_star)
    if isinstance(seed, tuple):
        gps_rng, odom_rng = seed
    elif isinstance(seed, np.random.Generator):
        gps_rng = odom_rng = seed
    else:
        gps_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_GPS_STREAM,)))
        odom_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_ODOM_STREAM,)))

    count = len(gt_poses)
    if gps_mode == "pose3":
        noise = gps_rng.normal(0.0, 1.0, size=(count, 3)) * np.sqrt(gps_var[:3])
        gps = np.array([compose(exp(n), p).as_array() for n, p in zip(noise, gt_poses)])
    else:
        noise = gps_rng.normal(0.0, 1.0, size=(count, 2)) * np.sqrt(gps_var[:2])
        gps = np.array([p.translation for p in gt_poses]).reshape(count, 2) + noise

    eta = odom_rng.normal(0.0, 1.0, size=(max(count - 1, 0), 3)) * np.sqrt(odom_var)
    odom = [
        compose(exp(eta[i - 1]), compose(inverse(gt_poses[i - 1]), gt_poses[i]))
        for i in range(1, count)
    ]
    return Trajectory(list(gt_poses), gps, odom, gps_mode)


def generate_trajectory(config: GenConfig, index: int) -> Trajectory:
    gt = generate_gt(config, index)
    rngs = (
        _rng(config.seed, config.stream, index, _GPS_STREAM),
        _rng(config.seed, config.stream, index, _ODOM_STREAM),
    )
    return simulate_measurements(gt, config.theta_star, rngs, config.gps_mode)


# --- File formats ---


def _records(trajectory: Trajectory):
    pose3 = trajectory.gps_mode == "pose3"
    for i, pose in enumerate(trajectory.gt_poses):
        yield {"t": i, "kind": "pose_gt", "x": pose.tx, "y": pose.ty, "theta": pose.theta}
        z = trajectory.gps_measurements[i]
        record = {"t": i, "kind": "gps", "x": float(z[0]), "y": float(z[1])}
        if pose3:
            record["theta"] = float(z[2])
        yield record
        if i > 0:
            o = trajectory.odom_measurements[i - 1]
            yield {"t": i, "kind": "odom", "dx": o.tx, "dy": o.ty, "dtheta": o.theta}


def write_trajectory(trajectory: Trajectory, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with path.open("w", encoding="utf-8") as handle:
            for record in _records(trajectory):
                handle.write(json.dumps(record) + "\n")
    except OSError as e:
        raise DataError(f"cannot write trajectory: {e}", path) from e
    return path


def read_trajectory(path, gps_mode: str = "position2") -> Trajectory:
    path = Path(path)
    poses: dict[int, Pose2] = {}
    gps: dict[int, list[float]] = {}
    odom: dict[int, Pose2] = {}
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read trajectory: {e}", path) from e
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            t = int(record["t"])
            kind = record["kind"]
            if kind == "pose_gt":
                poses[t] = Pose2(record["x"], record["y"], record["theta"])
            elif kind == "gps":
                z = [float(record["x"]), float(record["y"])]
                if gps_mode == "pose3":
                    z.append(float(record["theta"]))
                gps[t] = z
            elif kind == "odom":
                odom[t] = Pose2(record["dx"], record["dy"], record["dtheta"])
            else:
                raise DataError(f"unknown record kind {kind!r}", path, number)
        except DataError:
            raise
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"malformed record: {e}", path, number) from e
    count = len(poses)
    if sorted(poses) != list(range(count)) or sorted(gps) != list(range(count)):
        raise DataError("pose/gps records must cover t = 0..T-1 exactly once", path)
    if sorted(odom) != list(range(1, count)):
        raise DataError("odom records must cover t = 1..T-1 exactly once", path)
    return Trajectory(
        [poses[t] for t in range(count)],
        np.array([gps[t] for t in range(count)]),
        [odom[t] for t in range(1, count)],
        gps_mode,
        source=path,
    )


# --- Datasets ---


def gen_config_from_preset(
    preset: Mapping, split: str, count: int, length: int, seed: int
) -> GenConfig:
    theta = preset["theta_star"]
    motion = preset.get("motion", {})
    return GenConfig(
        length=length,
        n_traj=count,
        theta_star_gps=tuple(theta["gps"]),
        theta_star_odom=tuple(theta["odom"]),
        step_length=float(motion.get("step_length", 1.0)),
        heading_std=float(motion.get("heading_std", 0.1)),
        seed=int(seed),
        gps_mode=preset.get("gps_mode", "position2"),
        stream=split_stream(split),
    )


def _preset_splits(preset: Mapping) -> dict[str, tuple[int, int]]:
    splits = {}
    for name, shape in preset.get("splits", {}).items():
        splits[name] = (int(shape["count"]), int(shape["length"]))
    return splits or dict(DEFAULT_SPLITS)


def make_dataset(
    preset: str | Mapping,
    out_dir,
    seed: int = 0,
    n_train: int | None = None,
    len_train: int | None = None,
    n_test: int | None = None,
    len_test: int | None = None,
    n_train_long: int | None = None,
    len_train_long: int | None = None,
) -> Path:
    """Write every split of ``preset`` under ``out_dir`` plus a manifest; returns its path.

    Split shapes come from the preset and may be overridden per split.
    """
    preset = load_preset(preset) if isinstance(preset, str) else dict(preset)
    splits = _preset_splits(preset)
    overrides = {
        "train": (n_train, len_train),
        "train_long": (n_train_long, len_train_long),
        "test": (n_test, len_test),
    }
    for name, (count, length) in overrides.items():
        base_count, base_length = splits.get(name, DEFAULT_SPLITS[name])
        splits[name] = (
            base_count if count is None else count,
            base_length if length is None else length,
        )

    out_dir = Path(out_dir)
    files: dict[str, list[str]] = {}
    for name, (count, length) in splits.items():
        config = gen_config_from_preset(preset, name, count, length, seed)
        files[name] = []
        for index in range(count):
            relative = f"{name}/traj_{index:03d}.jsonl"
            write_trajectory(generate_trajectory(config, index), out_dir / relative)
            files[name].append(relative)
        logger.info("wrote %d %s trajectories of length %d", count, name, length)

    manifest = {
        "preset": preset.get("name", "custom"),
        "gps_mode": preset.get("gps_mode", "position2"),
        "theta_star": {
            "gps": list(preset["theta_star"]["gps"]),
            "odom": list(preset["theta_star"]["odom"]),
        },
        "motion": {
            "step_length": float(preset.get("motion", {}).get("step_length", 1.0)),
            "heading_std": float(preset.get("motion", {}).get("heading_std", 0.1)),
            "model": "random-heading walk",
        },
        "seed": int(seed),
        "splits": {name: {"count": c, "length": n} for name, (c, n) in splits.items()},
        "files": files,
    }
    manifest_path = out_dir / MANIFEST_NAME
    try:
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write manifest: {e}", manifest_path) from e
    return manifest_path


def regenerate_from_manifest(manifest_path, out_dir) -> Path:
    """Rebuild a dataset from a manifest's recorded preset values, splits and seed."""
    manifest = read_manifest(manifest_path)
    preset = {
        "name": manifest["preset"],
        "gps_mode": manifest["gps_mode"],
        "theta_star": manifest["theta_star"],
        "motion": {k: manifest["motion"][k] for k in ("step_length", "heading_std")},
        "splits": manifest["splits"],
    }
    return make_dataset(preset, out_dir, seed=manifest["seed"])


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read manifest: {e}", path) from e
    except json.JSONDecodeError as e:
        raise DataError(f"invalid manifest JSON: {e}", path, e.lineno) from e
    for key in ("preset", "gps_mode", "theta_star", "seed", "splits", "files"):
        if key not in manifest:
            raise DataError(f"manifest lacks {key!r}", path)
    return manifest


def split_paths(root, split: str) -> list[Path]:
    root = Path(root)
    manifest = read_manifest(root)
    if split not in manifest["files"]:
        raise ConfigError(f"dataset {root} has no split {split!r}")
    return [root / relative for relative in manifest["files"][split]]


def load_split(root, split: str, limit: int | None = None) -> list[Trajectory]:
    """Trajectories of ``split`` (the first ``limit`` if given)."""
    manifest = read_manifest(root)
    paths = split_paths(root, split)
    if limit is not None:
        if limit > len(paths):
            raise ConfigError(f"split {split!r} has {len(paths)} trajectories, {limit} requested")
        paths = paths[:limit]
    return [read_trajectory(p, manifest["gps_mode"]) for p in paths]


def theta_star_from_manifest(root) -> NoiseParams:
    manifest = read_manifest(root)
    return NoiseParams(manifest["theta_star"]["gps"], manifest["theta_star"]["odom"])


__all__ = [
    "GenConfig",
    "Trajectory",
    "generate_gt",
    "generate_trajectory",
    "load_split",
    "make_dataset",
    "read_manifest",
    "read_trajectory",
    "regenerate_from_manifest",
    "simulate_measurements",
    "write_trajectory",
]
