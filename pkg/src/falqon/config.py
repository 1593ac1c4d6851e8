"""INI run files: one document configures training, cost model, and outputs.

A run file holds up to four sections, all optional:

    [run]       training settings; keys mirror TrainConfig fields
    [cost]      cost-model calibration; keys mirror CostParams fields
    [output]    artifact paths: report, checkpoint, breakdown, compare
    [resume]    from = <checkpoint to restore before training>

Unknown sections and unknown keys are rejected, as are values that do
not parse as the target field's type; a typo never silently becomes a
default. Omitted keys take the library defaults. Relative paths in
[output] and [resume] resolve against the run file's own directory, so
a config directory is self-contained wherever it is invoked from.
"""

from __future__ import annotations

from configparser import ConfigParser
from configparser import Error as IniError
from dataclasses import dataclass, fields
from pathlib import Path

from .overhead import CostParams
from .training import TrainConfig

_BOOLEAN_STATES = ConfigParser.BOOLEAN_STATES

_OUTPUT_DEFAULTS = {
    "report": "report.json",
    "checkpoint": "run.ckpt",
    "breakdown": "breakdown.csv",
    "compare": "compare.csv",
}

_SECTIONS = ("run", "cost", "output", "resume")


@dataclass
class OutputPaths:
    report: Path
    checkpoint: Path
    breakdown: Path
    compare: Path


@dataclass
class RunSetup:
    """Everything one command needs, parsed and validated."""

    train: TrainConfig
    cost: CostParams
    outputs: OutputPaths
    resume_from: Path | None


def _parse_bool(text: str) -> bool:
    key = text.strip().lower()
    if key not in _BOOLEAN_STATES:
        raise ValueError(f"not a boolean: {text!r}")
    return _BOOLEAN_STATES[key]


def _parse_dims(text: str) -> list:
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("empty dims")
    return [int(p) for p in parts]


def _field_types(cls) -> dict:
    out = {}
    for f in fields(cls):
        t = f.type
        out[f.name] = t if isinstance(t, str) else t.__name__
    return out


def _convert(section: str, key: str, value: str, type_name: str):
    try:
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
        if type_name == "bool":
            return _parse_bool(value)
        if type_name == "tuple":
            return _parse_dims(value)
        return value
    except ValueError as exc:
        raise ValueError(
            f"[{section}] {key} = {value!r}: {exc}") from exc


def _section_dict(parser: ConfigParser, section: str, types: dict) -> dict:
    if not parser.has_section(section):
        return {}
    out = {}
    for key, value in parser.items(section):
        if key not in types:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        out[key] = _convert(section, key, value, types[key])
    return out


def load_config(path) -> RunSetup:
    """Parse and validate one run file; raises ValueError on any defect."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    parser = ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except IniError as exc:
        raise ValueError(f"malformed config {path}: {exc}") from exc
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")

    train = TrainConfig.from_dict(
        _section_dict(parser, "run", _field_types(TrainConfig)))

    # CostParams has no tuple fields; fp8_throughput omitted -> doubled
    cost_types = {name: t if t != "float | None" else "float"
                  for name, t in _field_types(CostParams).items()}
    cost = CostParams(**_section_dict(parser, "cost", cost_types))

    base = path.resolve().parent
    out_kwargs = dict(_OUTPUT_DEFAULTS)
    out_kwargs.update(_section_dict(
        parser, "output", {k: "str" for k in _OUTPUT_DEFAULTS}))
    outputs = OutputPaths(**{k: base / v for k, v in out_kwargs.items()})

    resume = _section_dict(parser, "resume", {"from": "str"})
    resume_from = base / resume["from"] if "from" in resume else None
    return RunSetup(train, cost, outputs, resume_from)
