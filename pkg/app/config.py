import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from dotenv import load_dotenv

from app.errors import ConfigError

load_dotenv()

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
SHIPPED_HAND_DIR = Path(__file__).resolve().parent / "hands"
TTA_MODES = ("ab-tta", "vanilla", "gdis", "tm")
SYNTH_KINDS = ("sphere", "box", "cylinder")

logger = logging.getLogger(__name__)


# Environment settings
def get_log_level():
    return os.getenv("GRASP_LOG_LEVEL", "INFO").upper()


def get_output_dir():
    return Path(os.getenv("GRASP_OUTPUT_DIR", "data/runs"))


def get_hand_dir():
    return Path(os.getenv("GRASP_HAND_DIR", str(SHIPPED_HAND_DIR)))


def get_workers():
    raw = os.getenv("GRASP_WORKERS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"GRASP_WORKERS must be an integer, got '{raw}'")
    if workers < 1:
        raise ConfigError(f"GRASP_WORKERS must be >= 1, got {workers}")
    return workers


def configure_logging(level=None):
    """Configure root logging the same way for every entry point."""
    logging.basicConfig(level=level or get_log_level(), format=LOG_FORMAT)


def resolve_hand_path(hand):
    """A hand reference is either a file path or the name of a config in the hand directory."""
    path = Path(hand)
    if path.is_file():
        return path
    candidate = get_hand_dir() / f"{hand}.json"
    if candidate.is_file():
        return candidate
    candidate = SHIPPED_HAND_DIR / f"{hand}.json"
    if candidate.is_file():
        return candidate
    raise ConfigError(f"hand config not found: {hand}")


def _build(cls, data, section):
    if data is None:
        return cls()
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    try:
        record = cls(**data)
    except TypeError as e:
        raise ConfigError(f"{section}: {e}")
    record.validate()
    return record


def _plain(record):
    return {f.name: getattr(record, f.name) for f in fields(record)}


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


@dataclass(frozen=True)
class LossWeights:
    """Loss weights for training (lambda) and test-time refinement (alpha).

    `pen` (lambda6) and `distance` are the only penetration and vanilla-distance weights;
    training applies them in penalty epochs only.
    """

    param_translation: float = 10.0
    param_joints: float = 10.0
    param_rotation: float = 10.0
    chamfer: float = 1.0
    spen: float = 10.0
    pen: float = 50.0
    distance: float = 10.0
    alpha_pen: float = 5.0
    alpha_dist: float = 3.0
    alpha_spen: float = 5.0
    tau: float = 0.01
    smooth_l1_beta: float = 0.1
    spen_separation: float | None = None

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            _require(float(value) >= 0.0, f"loss.{f.name} must be >= 0, got {value}")
        _require(self.tau > 0.0, "loss.tau must be > 0")
        _require(self.smooth_l1_beta > 0.0, "loss.smooth_l1_beta must be > 0")

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "loss")

    def to_dict(self):
        return _plain(self)


@dataclass(frozen=True)
class CostWeights:
    translation: float = 2.0
    joints: float = 1.0
    rotation: float = 2.0

    def validate(self):
        for name, value in _plain(self).items():
            _require(value >= 0.0, f"cost.{name} must be >= 0, got {value}")

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "cost")

    def to_dict(self):
        return _plain(self)


@dataclass(frozen=True)
class StageSchedule:
    """Epoch counts and optimizer settings for dynamic matching, static warm-up and penalty training.

    `table_decay` is a decoupled decay pulling every query state toward the table mean each step,
    applied outside the clipped gradient. It couples the otherwise independent queries the way shared
    decoder weights do.
    """

    dmt_epochs: int = 15
    smw_epochs: int = 5
    smpt_epochs: int = 5
    steps_per_epoch: int = 50
    step_size: float = 0.05
    clip_norm: float = 1.0
    table_decay: float = 0.0
    static_matching: bool = True
    chamfer_samples: int = 64

    def validate(self):
        for name in ("dmt_epochs", "smw_epochs", "smpt_epochs"):
            _require(getattr(self, name) >= 0, f"schedule.{name} must be >= 0")
        _require(self.steps_per_epoch >= 1, "schedule.steps_per_epoch must be >= 1")
        _require(self.step_size > 0.0, "schedule.step_size must be > 0")
        _require(self.clip_norm > 0.0, "schedule.clip_norm must be > 0")
        _require(self.table_decay >= 0.0, "schedule.table_decay must be >= 0")
        _require(self.step_size * self.table_decay < 1.0, "schedule.step_size * table_decay must be < 1")
        _require(self.chamfer_samples >= 1, "schedule.chamfer_samples must be >= 1")

    @property
    def total_epochs(self):
        return self.dmt_epochs + self.smw_epochs + self.smpt_epochs

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "schedule")

    def to_dict(self):
        return _plain(self)


@dataclass(frozen=True)
class TtaConfig:
    steps: int = 200
    step_size: float = 1e-3
    beta_t: float = 0.0
    tolerance: float = 1e-9
    mode: str = "ab-tta"
    patience: int = 10
    alpha_pen: float = 5.0
    alpha_dist: float = 3.0
    alpha_spen: float = 5.0
    tau: float = 0.01

    def validate(self):
        _require(self.steps >= 1, "tta.steps must be >= 1")
        _require(self.step_size > 0.0, "tta.step_size must be > 0")
        _require(0.0 <= self.beta_t <= 1.0, f"tta.beta_t must lie in [0, 1], got {self.beta_t}")
        _require(self.tolerance >= 0.0, "tta.tolerance must be >= 0")
        _require(self.mode in TTA_MODES, f"tta.mode must be one of {list(TTA_MODES)}, got '{self.mode}'")
        _require(self.patience >= 1, "tta.patience must be >= 1")
        for name in ("alpha_pen", "alpha_dist", "alpha_spen"):
            _require(getattr(self, name) >= 0.0, f"tta.{name} must be >= 0")
        _require(self.tau > 0.0, "tta.tau must be > 0")

    def loss_weights(self):
        return LossWeights(
            alpha_pen=self.alpha_pen,
            alpha_dist=self.alpha_dist,
            alpha_spen=self.alpha_spen,
            tau=self.tau,
        )

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "tta")

    def to_dict(self):
        return _plain(self)


@dataclass(frozen=True)
class Q1Params:
    contact_threshold: float = 0.01
    penetration_threshold: float = 0.005
    friction: float = 0.5
    cone_edges: int = 8
    directions: int = 1024
    torque_scale: float | None = None
    polish_starts: int = 4
    seed: int = 0

    def validate(self):
        _require(self.contact_threshold > 0.0, "q1.contact_threshold must be > 0")
        _require(self.penetration_threshold > 0.0, "q1.penetration_threshold must be > 0")
        _require(self.friction >= 0.0, "q1.friction must be >= 0")
        _require(self.cone_edges >= 3, "q1.cone_edges must be >= 3")
        _require(self.directions >= 1, "q1.directions must be >= 1")
        _require(self.torque_scale is None or self.torque_scale > 0.0, "q1.torque_scale must be > 0")
        _require(self.polish_starts >= 0, "q1.polish_starts must be >= 0")

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "q1")

    def to_dict(self):
        return _plain(self)


@dataclass(frozen=True)
class ObjectSpec:
    """One training/evaluation object: a cloud file or a synthetic primitive."""

    name: str
    path: str | None = None
    kind: str | None = None
    size: float | tuple = 0.04
    center: tuple = (0.0, 0.0, 0.0)
    axis: str = "z"
    points: int = 2048
    scale: float = 1.0
    targets: str | None = None

    def validate(self):
        _require(bool(self.name), "objects[].name is required")
        _require(
            (self.path is None) != (self.kind is None),
            f"object '{self.name}': exactly one of path or kind is required",
        )
        if self.kind is not None:
            _require(self.kind in SYNTH_KINDS, f"object '{self.name}': unknown kind '{self.kind}'")
            _require(self.axis in ("x", "y", "z"), f"object '{self.name}': axis must be x, y or z")
            _require(len(self.center) == 3, f"object '{self.name}': center needs 3 values")
        _require(self.points >= 1, f"object '{self.name}': points must be >= 1")
        _require(self.scale > 0.0, f"object '{self.name}': scale must be > 0")

    def to_dict(self):
        data = _plain(self)
        if isinstance(self.size, tuple):
            data["size"] = list(self.size)
        data["center"] = list(self.center)
        return data


@dataclass(frozen=True)
class RunConfig:
    seed: int
    hand: str
    objects: tuple[ObjectSpec, ...]
    queries: int = 16
    init_radius: float = 0.15
    target_count: int = 16
    loss: LossWeights = field(default_factory=LossWeights)
    cost: CostWeights = field(default_factory=CostWeights)
    schedule: StageSchedule = field(default_factory=StageSchedule)
    tta: TtaConfig = field(default_factory=TtaConfig)
    q1: Q1Params = field(default_factory=Q1Params)
    output_dir: str | None = None

    def validate(self, base_dir=None):
        _require(isinstance(self.seed, int) and not isinstance(self.seed, bool), "seed must be an integer")
        _require(len(self.objects) >= 1, "objects must list at least one object")
        _require(self.queries >= 1, "queries must be >= 1")
        _require(self.init_radius > 0.0, "init_radius must be > 0")
        _require(self.target_count >= 1, "target_count must be >= 1")
        if self.schedule.smpt_epochs > 0:
            _require(self.loss.pen > 0.0, "loss.pen must be > 0 when schedule.smpt_epochs > 0")
        names = [spec.name for spec in self.objects]
        _require(len(set(names)) == len(names), f"object names must be unique, got {names}")
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        resolve_hand_path(self._relative(base, self.hand))
        for spec in self.objects:
            for ref in (spec.path, spec.targets):
                if ref is not None and not self._relative(base, ref).is_file():
                    raise ConfigError(f"object '{spec.name}': file not found: {self._relative(base, ref)}")

    @staticmethod
    def _relative(base, ref):
        path = Path(ref)
        if path.is_absolute() or path.exists():
            return path
        candidate = base / path
        return candidate if candidate.exists() else path

    def resolve(self, base_dir):
        """Rewrite relative file references against the directory of the config file."""
        base = Path(base_dir)
        hand = self.hand
        rel = self._relative(base, hand)
        if rel.is_file():
            hand = str(rel)
        objects = []
        for spec in self.objects:
            path = str(self._relative(base, spec.path)) if spec.path else None
            targets = str(self._relative(base, spec.targets)) if spec.targets else None
            objects.append(ObjectSpec(**{**_plain(spec), "path": path, "targets": targets}))
        return RunConfig(**{**_plain(self), "hand": hand, "objects": tuple(objects)})

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"run config: unknown keys {unknown}")
        if "seed" not in data:
            raise ConfigError("seed is mandatory")
        if "hand" not in data:
            raise ConfigError("hand is mandatory")
        objects = []
        for i, item in enumerate(data.get("objects") or []):
            if not isinstance(item, dict):
                raise ConfigError(f"objects[{i}]: expected an object")
            for key in ("size", "center"):
                if isinstance(item.get(key), list):
                    item = {**item, key: tuple(item[key])}
            objects.append(_build(ObjectSpec, item, f"objects[{i}]"))
        return cls(
            seed=data["seed"],
            hand=str(data["hand"]),
            objects=tuple(objects),
            queries=int(data.get("queries", 16)),
            init_radius=float(data.get("init_radius", 0.15)),
            target_count=int(data.get("target_count", 16)),
            loss=LossWeights.from_dict(data.get("loss")),
            cost=CostWeights.from_dict(data.get("cost")),
            schedule=StageSchedule.from_dict(data.get("schedule")),
            tta=TtaConfig.from_dict(data.get("tta")),
            q1=Q1Params.from_dict(data.get("q1")),
            output_dir=data.get("output_dir"),
        )

    def to_dict(self):
        return {
            "seed": self.seed,
            "hand": self.hand,
            "objects": [spec.to_dict() for spec in self.objects],
            "queries": self.queries,
            "init_radius": self.init_radius,
            "target_count": self.target_count,
            "loss": self.loss.to_dict(),
            "cost": self.cost.to_dict(),
            "schedule": self.schedule.to_dict(),
            "tta": self.tta.to_dict(),
            "q1": self.q1.to_dict(),
            "output_dir": self.output_dir,
        }

    def config_hash(self):
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_run_config(path):
    """Read, resolve and validate a JSON run-config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"run config not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    config = RunConfig.from_dict(data).resolve(path.parent)
    config.validate(path.parent)
    logger.info(f"Loaded run config {path} (seed={config.seed}, objects={len(config.objects)})")
    return config
