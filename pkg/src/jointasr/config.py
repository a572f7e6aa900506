"""Run configuration: one JSON document, every field explicit.

Unknown keys, missing keys and wrongly typed values are all errors, and
the error message carries the line of the offending key so a typo in a
hand-edited file is easy to find.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field

from .blocking import BlockSpec
from .corpus import SyntheticCorpusSpec
from .losses import LossWeights
from .model import ModelConfig
from .trainer import MtlWeights, TrainConfig


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 10

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")


SECTIONS = {
    "model": ModelConfig,
    "block": BlockSpec,
    "train": TrainConfig,
    "mtl": MtlWeights,
    "loss": LossWeights,
    "corpus": SyntheticCorpusSpec,
    "decode": DecodeConfig,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(subsample_factor=4))
    block: BlockSpec = field(default_factory=BlockSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    mtl: MtlWeights = field(default_factory=MtlWeights)
    loss: LossWeights = field(default_factory=LossWeights)
    corpus: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.model.D_in != self.corpus.D_in:
            raise ValueError(f"model.D_in={self.model.D_in} != corpus.D_in={self.corpus.D_in}")
        if self.model.V != self.corpus.V:
            raise ValueError(f"model.V={self.model.V} != corpus.V={self.corpus.V}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "RunConfig":
        """Override fields per section, e.g. ``replace(train={"seed": 3})``."""
        updates = {}
        for name, changes in sections.items():
            if name == "out_dir":
                updates[name] = changes
            else:
                updates[name] = dataclasses.replace(getattr(self, name), **changes)
        return dataclasses.replace(self, **updates)


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


def run_dict(cfg: RunConfig) -> dict:
    """Everything that determines results; ``out_dir`` is left out."""
    d = cfg.to_dict()
    del d["out_dir"]
    return d


def config_hash(cfg: RunConfig) -> str:
    """sha256 of the canonical JSON form (sorted keys, no whitespace), excluding out_dir."""
    blob = json.dumps(run_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def dump_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=False)
        fh.write("\n")


def from_run_dict(d: dict, out_dir: str = "runs/default") -> RunConfig:
    return parse_config(json.dumps({**d, "out_dir": out_dir}), source="<checkpoint>")


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, source=path)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, e.lineno, source) from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", 1, source)
    locate = _Locator(text)

    expected = set(SECTIONS) | {"out_dir"}
    for key in raw:
        if key not in expected:
            raise ConfigError(f"unknown key {key!r}", locate(key), source)
    for key in sorted(expected - set(raw)):
        raise ConfigError(f"missing key {key!r}", 1, source)
    if not isinstance(raw["out_dir"], str):
        raise ConfigError("out_dir must be a string", locate("out_dir"), source)

    built = {"out_dir": raw["out_dir"]}
    for name, cls in SECTIONS.items():
        body = raw[name]
        line = locate(name)
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be an object", line, source)
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in body.items():
            if key not in fields:
                raise ConfigError(f"unknown key {name}.{key}", locate(key, after=line), source)
            err = _type_error(fields[key].type, value)
            if err:
                raise ConfigError(f"{name}.{key}: {err}", locate(key, after=line), source)
        missing = sorted(set(fields) - set(body))
        if missing:
            raise ConfigError(f"section {name!r} is missing {', '.join(missing)}", line, source)
        body = {k: _coerce(fields[k].type, v) for k, v in body.items()}
        try:
            built[name] = cls(**body)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{name}: {e}", line, source) from None
    try:
        return RunConfig(**built)
    except ValueError as e:
        raise ConfigError(str(e), None, source) from None


def _type_error(annotation, value) -> str | None:
    """Check a JSON value against a string annotation such as ``float | None``."""
    allowed = {a.strip() for a in str(annotation).split("|")}
    if value is None:
        return None if "None" in allowed else "null not allowed"
    if isinstance(value, bool):
        return None if "bool" in allowed else f"expected {annotation}, got bool"
    if isinstance(value, int) and ({"int", "float"} & allowed):
        return None
    if isinstance(value, float) and "float" in allowed:
        return None
    if isinstance(value, str) and "str" in allowed:
        return None
    return f"expected {annotation}, got {type(value).__name__}"


def _coerce(annotation, value):
    allowed = {a.strip() for a in str(annotation).split("|")}
    if isinstance(value, int) and not isinstance(value, bool) and "float" in allowed and "int" not in allowed:
        return float(value)
    return value


class _Locator:
    """Best-effort line lookup of a key in the raw JSON text."""

    def __init__(self, text: str):
        self.lines = text.splitlines()

    def __call__(self, key: str, after: int | None = None) -> int | None:
        pat = re.compile(r'"%s"\s*:' % re.escape(key))
        start = (after or 1) - 1
        for i in range(start, len(self.lines)):
            if pat.search(self.lines[i]):
                return i + 1
        return None
