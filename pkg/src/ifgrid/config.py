"""Run configuration: defaults, key-value config files, and flag overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields


@dataclass
class RunConfig:
    seed: int = 0
    d: int = 32
    k_views: int = 5
    n_slots: int = 8
    gate: str = "sigmoid"            # or "softmax" (ablation)
    two_stage: bool = True
    selection: bool = True
    lr: float = 1e-3
    halve_epochs: tuple = (5, 8, 10)
    epochs: int = 15
    batch_size: int = 32
    dropout: float = 0.2
    n_train: int = 500
    n_valid_seen: int = 70
    n_valid_unseen: int = 70
    max_steps: int = 200
    max_fails: int = 10
    misleading: float = 0.0
    detector_noise: float = 0.0

    def __post_init__(self):
        if self.k_views not in (1, 3, 5):
            raise ValueError(f"k_views must be 1, 3 or 5, got {self.k_views}")
        if self.gate not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown gate {self.gate!r}")

    def to_dict(self):
        d = asdict(self)
        d["halve_epochs"] = list(self.halve_epochs)
        return d

    @staticmethod
    def from_dict(data):
        kwargs = {}
        for f in fields(RunConfig):
            if f.name in data:
                kwargs[f.name] = _coerce(f, data[f.name])
        return RunConfig(**kwargs)


def _coerce(f, value):
    if f.name == "halve_epochs":
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple(int(v) for v in value)
    if f.type == "bool" or isinstance(f.default, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(f.default, int):
        return int(value)
    if isinstance(f.default, float):
        return float(value)
    return value


def load_config(path=None, overrides=()):
    """Config from a `key = value` text file plus command-line overrides."""
    data = {}
    if path:
        with open(path) as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                data[key.strip()] = value.strip()
    for item in overrides:
        key, _, value = item.partition("=")
        data[key.strip()] = value.strip()
    return RunConfig.from_dict(data)
