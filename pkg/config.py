"""Run configuration, error types and artifact stamping shared by every command."""
import copy
import hashlib
import json

TOOL_VERSION = "0.1.0"


class RemoError(Exception):
    exit_code = 2


class ValidationError(RemoError):
    exit_code = 1


class ConfigError(ValidationError):
    pass


class DatasetError(ValidationError):
    pass


class VocabMismatchError(ValidationError):
    pass


class SmilesError(ValidationError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class ReactionParseError(ValidationError):
    def __init__(self, message, segment=None, molecule=None, offset=None):
        where = []
        if segment is not None:
            where.append(f"{segment} segment")
        if molecule is not None:
            where.append(f"molecule {molecule}")
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.segment = segment
        self.molecule = molecule
        self.offset = offset


class UnmappableReactionError(ValidationError):
    pass


class NumericsError(RemoError):
    pass


class ShapeError(NumericsError):
    def __init__(self, op, *shapes):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.op = op
        self.shapes = shapes


class NonFiniteGradientError(NumericsError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter '{name}'")
        self.name = name


DEFAULTS = {
    "seed": 0,
    "encoder": {
        "kind": "gin",
        "layers": 2,
        "hidden_dim": 64,
        "heads": 4,
        "max_sp_distance": 20,
        "edge_dim": 16,
        "ffn_dim": None,
        "max_degree": 8,
    },
    "pretrain": {
        "objective": "IM",
        "lr": 3e-4,
        "batch_size": 128,
        "epochs": 5,
        "val_fraction": 0.1,
        "max_centre_atoms": 20,
        "rci_class_weight": False,
        "use_context": True,
        "head_hidden": None,
        "precision": "float32",
        "token_charge": False,
    },
    "finetune": {
        "lr": 1e-4,
        "epochs": 50,
        "batch_size": 32,
        "patience": 10,
        "freeze_encoder": False,
        "head_hidden": None,
        "precision": "float32",
        "split": None,
    },
}


def _merge(defaults, overrides, path):
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}{key}' must be an object")
            merged[key] = _merge(defaults[key], value, f"{path}{key}.")
        else:
            merged[key] = value
    return merged


def config_hash(values):
    canonical = json.dumps(values, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


class RunConfig:
    """Fully-resolved command configuration.

    Built from DEFAULTS, then an optional JSON file, then CLI overrides.
    """

    def __init__(self, values=None):
        self.values = _merge(DEFAULTS, values or {}, "")

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as handle:
                values = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc.msg} (line {exc.lineno})") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls(values)

    def override(self, section, key, value):
        if value is None:
            return
        if section is None:
            self.values[key] = value
        else:
            self.values[section][key] = value

    @property
    def seed(self):
        return int(self.values["seed"])

    @property
    def hash(self):
        return config_hash(self.values)

    def section(self, name):
        return dict(self.values[name])

    def stamp(self):
        return {"tool_version": TOOL_VERSION, "config_hash": self.hash, "seed": self.seed}
