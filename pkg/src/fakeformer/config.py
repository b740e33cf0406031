"""Run configuration and dataset manifests."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .evaluation import DEFAULT_SSIM_EDGES, PERTURBATIONS
from .model import PRESETS, ModelConfig
from .synthesis import SynthParams
from .training import TrainConfig

LABELS = ("real", "fake")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _check_keys(d: dict, allowed, where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class EvalConfig:
    bins: list = field(default_factory=lambda: list(DEFAULT_SSIM_EDGES))
    perturbations: list = field(default_factory=lambda: list(PERTURBATIONS))
    severities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    aggregation: str = "mean"
    batch_size: int = 64

    def __post_init__(self):
        if self.aggregation not in ("mean", "max"):
            raise ConfigError("eval.aggregation must be 'mean' or 'max'")
        bad = [k for k in self.perturbations if k not in PERTURBATIONS]
        if bad:
            raise ConfigError(f"unknown perturbations: {bad}")


@dataclass
class PathsConfig:
    manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    out: str = "runs/default"


@dataclass
class RunConfig:
    seed: int
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthParams = field(default_factory=SynthParams)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    toy_size: int = 200
    val_fraction: float = 0.2

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(d, {f.name for f in fields(cls)}, "run config")
        if "seed" not in d:
            raise ConfigError("config must set 'seed'")
        model = d.get("model", {})
        if isinstance(model, str):
            if model.lower() not in PRESETS:
                raise ConfigError(f"unknown model preset {model!r}, expected one of {sorted(PRESETS)}")
            model = PRESETS[model.lower()].to_dict()
        model = dict(model)
        model.setdefault("seed", int(d["seed"]))
        try:
            mcfg = ModelConfig.from_dict(model)
            tcfg = TrainConfig.from_dict({"seed": int(d["seed"]), **d.get("train", {})})
            synth = d.get("synth", {})
            _check_keys(synth, {f.name for f in fields(SynthParams)}, "synth")
            scfg = SynthParams.from_dict(synth)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        ev = d.get("eval", {})
        _check_keys(ev, {f.name for f in fields(EvalConfig)}, "eval")
        paths = d.get("paths", {})
        _check_keys(paths, {f.name for f in fields(PathsConfig)}, "paths")
        return cls(
            seed=int(d["seed"]),
            model=mcfg,
            train=tcfg,
            synth=scfg,
            eval=EvalConfig(**ev),
            paths=PathsConfig(**paths),
            toy_size=int(d.get("toy_size", 200)),
            val_fraction=float(d.get("val_fraction", 0.2)),
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "synth": self.synth.to_dict(),
            "eval": dict(vars(self.eval)),
            "paths": dict(vars(self.paths)),
            "toy_size": self.toy_size,
            "val_fraction": self.val_fraction,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if seed is not None:
        doc["seed"] = seed
        if isinstance(doc.get("train"), dict):
            doc["train"] = {**doc["train"], "seed": seed}
        if isinstance(doc.get("model"), dict):
            doc["model"] = {**doc["model"], "seed": seed}
    return RunConfig.from_dict(doc)


@dataclass
class ManifestRecord:
    image: str
    landmarks: Optional[str]
    label: str
    source_id: str
    reference: Optional[str] = None


_MANIFEST_KEYS = {"image", "landmarks", "label", "source_id", "reference"}


def read_manifest(path: str) -> list[ManifestRecord]:
    """JSON-lines manifest; relative paths resolve against the manifest's folder."""
    base = Path(path).parent
    records = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for ln, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{ln}: invalid JSON") from exc
        if set(d) - _MANIFEST_KEYS:
            raise DataError(f"{path}:{ln}: unknown keys {sorted(set(d) - _MANIFEST_KEYS)}")
        if d.get("label") not in LABELS:
            raise DataError(f"{path}:{ln}: label must be 'real' or 'fake'")
        if not d.get("source_id"):
            raise DataError(f"{path}:{ln}: source_id must be non-empty")
        if "image" not in d:
            raise DataError(f"{path}:{ln}: missing image")

        def resolve(p):
            if p is None:
                return None
            q = Path(p)
            q = q if q.is_absolute() else base / q
            if not q.exists():
                raise DataError(f"{path}:{ln}: missing file {q}")
            return str(q)

        records.append(
            ManifestRecord(
                resolve(d["image"]),
                resolve(d.get("landmarks")),
                d["label"],
                str(d["source_id"]),
                resolve(d.get("reference")),
            )
        )
    return records


def write_manifest(path: str, records: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
