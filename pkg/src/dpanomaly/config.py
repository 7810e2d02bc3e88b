"""Experiment configuration: a YAML (or JSON) document with a fixed schema.

Example (outlier detection)::

    kind: outlier
    name: od-desk
    seeds: [0, 1, 2]
    output_dir: runs/od-desk
    data:
      normal: synthetic-digits        # or {images: a.idx, labels: b.idx}
      outliers: synthetic-glyphs
      n_train: 6000
      n_test: 2000
      n_test_outliers: 200
      ratios: [0.05]
    model: {kind: dense-autoencoder, widths: [784, 128, 32, 128, 784]}
    train: {lr: 3.0, batch_size: 50, epochs: 20}
    privacy: {clip: 0.1, sigmas: [null, 0, 1, 5]}

``sigmas`` uses ``null`` for the non-private baseline. ``clip_grid`` adds
cells that vary the clipping bound at noise ``clip_grid_sigma``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from dpanomaly.nn.model import ModelArch

KINDS = ("outlier", "sequence", "backdoor", "uaerm")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Cell:
    """One privacy setting of the grid; ``clip=None`` is plain SGD."""

    clip: float | None
    sigma: float | None

    @property
    def label(self) -> str:
        if self.clip is None:
            return "sigma=N/A"
        return f"C={self.clip:g},sigma={self.sigma:g}"


_DEFAULTS: dict[str, dict] = {
    "outlier": {
        "data": {
            "normal": "synthetic-digits",
            "outliers": "synthetic-glyphs",
            "n_train": 6000,
            "n_test": 2000,
            "n_test_outliers": 200,
            "ratios": [0.05],
        },
        "model": {"kind": "dense-autoencoder", "widths": [784, 128, 32, 128, 784]},
        "train": {"lr": 3.0, "batch_size": 50, "epochs": 20},
        "privacy": {"clip": 0.1, "sigmas": [None, 0, 1, 5]},
        "detect": {"taus": []},
    },
    "backdoor": {
        "data": {
            # unwarped digits: each class stays tight enough for 60 poisons to teach a general trigger
            "normal": {"source": "synthetic-digits", "style": {"rotation": 0.0, "scale": [1.0, 1.0], "shift": 0.0, "shear": 0.0}},
            "n_train": 6000,
            "n_test": 1000,
            "ratios": [0.01],
            "stratify": True,
        },
        "model": {"kind": "classifier", "widths": [784, 256, 256, 128, 10]},
        "train": {"lr": 0.35, "batch_size": 100, "epochs": 160},
        "privacy": {"clip": 1.0, "sigmas": [None, 0, 0.5]},
    },
    "sequence": {
        "data": {
            "source": "synthetic-hdfs",
            "n_normal": 2000,
            "n_abnormal": 200,
            "n_patterns": 8,
            "train_normal": 1000,
            "train_abnormal": 40,
            "window_pad": "full",
        },
        "model": {"kind": "lstm-lm", "vocab_size": 29, "history": 10, "hidden": 64},
        "train": {"lr": 1.0, "batch_size": 1000, "epochs": 60},
        "privacy": {"clip": 1.0, "sigmas": [None, 1]},
        "detect": {"ks": [1, 2, 3, 4, 5], "tps": [1e-3, 1e-4, 1e-5]},
    },
    "uaerm": {
        "data": {"normal": "synthetic-digits", "outliers": "synthetic-glyphs", "n_test": 1000, "n_test_outliers": 100},
        "model": {"kind": "dense-autoencoder", "widths": [784, 128, 32, 128, 784]},
        "train": {"lr": 3.0, "batch_size": 50, "epochs": 60},
        "privacy": {"clip": 0.1, "sigmas": [0.5, 1, 5]},
        "uaerm": {"sizes": [1000, 3000, 6000], "subsets": 3, "repeats": 3, "sampling_rate": 0.05},
        "checkpoints": False,
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    kind: str
    name: str = "experiment"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs"
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    privacy: dict = field(default_factory=dict)
    detect: dict = field(default_factory=dict)
    uaerm: dict = field(default_factory=dict)
    checkpoints: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        kind = d.get("kind")
        if kind not in KINDS:
            raise ConfigError(f"experiment kind must be one of {KINDS}, got {kind!r}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged = _merge({k: v for k, v in _DEFAULTS[kind].items()}, d)
        cfg = cls(**{k: merged[k] for k in cls.__dataclass_fields__ if k in merged})
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    @property
    def config_id(self) -> str:
        """Short content hash; two configs with the same settings share it."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return f"{self.name}-{hashlib.sha256(blob).hexdigest()[:10]}"

    def arch(self) -> ModelArch:
        m = dict(self.model)
        for key in ("widths", "channels"):
            if key in m:
                m[key] = tuple(m[key])
        return ModelArch(**m)

    def cells(self) -> list[Cell]:
        """The privacy grid; the two control cells come first for outlier and backdoor runs."""
        p = self.privacy
        clip = p.get("clip", 1.0)
        sigmas = list(p.get("sigmas", []))
        if self.kind in ("outlier", "backdoor"):
            # the non-private baseline and the clipping-only ablation are mandatory controls
            sigmas = [None, 0.0] + [s for s in sigmas if s is not None and float(s) != 0.0]
        out: list[Cell] = []
        for s in sigmas:
            cell = Cell(None, None) if s is None else Cell(float(clip), float(s))
            if cell not in out:
                out.append(cell)
        for c in p.get("clip_grid", []):
            cell = Cell(float(c), float(p.get("clip_grid_sigma", 0.5)))
            if cell not in out:
                out.append(cell)
        return out

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        if not self.cells():
            raise ConfigError("privacy grid is empty")
        for s in self.privacy.get("sigmas", []):
            if s is not None and float(s) < 0:
                raise ConfigError("noise scales must be non-negative")
        if self.kind in ("outlier", "backdoor") and not self.data.get("ratios"):
            raise ConfigError("ratio grid is empty")
        if self.kind == "sequence":
            if not self.detect.get("ks") and not self.detect.get("tps"):
                raise ConfigError("sequence runs need a k grid or a probability-threshold grid")
            d = self.data
            if d.get("source", "synthetic-hdfs") == "synthetic-hdfs":
                if d["train_normal"] >= d["n_normal"] or d["train_abnormal"] >= d["n_abnormal"]:
                    raise ConfigError("training split must leave normal and abnormal sessions for testing")
        if self.kind == "uaerm":
            u = self.uaerm
            if not u.get("sizes") or u.get("subsets", 0) < 1 or u.get("repeats", 0) < 1:
                raise ConfigError("uaerm grid needs sizes, subsets >= 1 and repeats >= 1")
        try:
            self.arch().validate()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc


class _Loader(yaml.SafeLoader):
    """Safe YAML loader that also reads dotless exponents such as ``1e-5`` as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def load_config(path) -> ExperimentConfig:
    """Read a config (YAML or JSON) or the ``config`` entry of a run manifest."""
    text = Path(path).read_text()
    doc = json.loads(text) if Path(path).suffix == ".json" else yaml.load(text, Loader=_Loader)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    if "manifest_version" in doc:
        doc = doc["config"]
    return ExperimentConfig.from_dict(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
