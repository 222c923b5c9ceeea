"""Flat key=value training configuration.

One `key=value` per line; blank lines and `#` comments are ignored.
Unknown keys and type errors are reported with their line number.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass


class ConfigError(Exception):
    """Raised for unreadable, unknown, or missing configuration keys."""


REQUIRED_KEYS = ("b", "p", "steps", "seed")


@dataclass
class TrainConfig:
    # batch shape
    b: int = 8
    p: int = 2
    # optimization
    steps: int = 2000
    seed: int = 1
    lr_f: float = 0.01
    momentum: float = 0.9
    lr_g: float = 3e-4
    lr_d: float = 3e-4
    # input geometry
    img_h: int = 48
    img_w: int = 24
    # model sizes
    feature_dim: int = 64
    stem_channels: int = 16
    trunk_channels: int = 32
    gen_channels: int = 16
    attention: bool = True
    tie_intermediate_stem: bool = True
    disc_binary: bool = False
    # loss weights and margins
    m1: float = 0.1
    m2: float = 0.3
    lambda_adv: float = 0.1
    lambda_cf: float = 10.0
    # loss variants
    triplet: str = "soft"        # soft | hinge
    triplet_mode: str = "dual"   # dual | plain
    id_families: str = "vzi"     # any nonempty subset of v, z, i
    use_generator: bool = True
    # augmentation schedule
    erase_p_start: float = 0.30
    erase_p_end: float = 0.50
    erase_s_start: float = 0.20
    erase_s_end: float = 0.30
    # lifecycle
    checkpoint_every: int = 250
    debug_freeze_checks: bool = False

    def __post_init__(self):
        if self.b < 2:
            raise ConfigError("b must be >= 2")
        if self.p < 1:
            raise ConfigError("p must be >= 1")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        for key in ("lr_f", "lr_g", "lr_d"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be > 0")
        if self.triplet not in ("soft", "hinge"):
            raise ConfigError(f"triplet must be soft or hinge, got {self.triplet!r}")
        if self.triplet_mode not in ("dual", "plain"):
            raise ConfigError(
                f"triplet_mode must be dual or plain, got {self.triplet_mode!r}")
        fams = set(self.id_families)
        if not fams or not fams <= {"v", "z", "i"}:
            raise ConfigError(
                f"id_families must be a nonempty subset of 'vzi', "
                f"got {self.id_families!r}")
        if not self.use_generator:
            # baseline has no intermediate family to classify
            self.id_families = "".join(c for c in self.id_families if c != "z") or "vi"
            self.triplet_mode = "plain"

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _convert(key, raw, line_no):
    typ = _FIELDS[key].type
    try:
        if typ == "bool" or typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ == "int" or typ is int:
            return int(raw)
        if typ == "float" or typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"line {line_no}: bad value {raw!r} for key {key!r}") from None


def parse_config(text):
    """Parse flat key=value text into a TrainConfig."""
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        values[key] = _convert(key, raw.strip(), line_no)
    for key in REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(f"missing required config key {key!r}")
    return TrainConfig(**values)


def load_config(path):
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def dump_config(config):
    """Flat key=value snapshot, one line per field."""
    lines = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"
