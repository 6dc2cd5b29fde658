"""Run configuration file: INI sections ``[data] [mltm] [fusion] [train]``.

Every field is addressable as ``section.field``; unknown sections or keys are
rejected, and writing always materialises every default.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from medfuse.ehr_data import GenConfig
from medfuse.fusion import FusionConfig
from medfuse.mltm import MltmConfig
from medfuse.training import TrainConfig
from medfuse.utils import atomic_write_text, config_hash

SECTIONS = {"data": GenConfig, "mltm": MltmConfig, "fusion": FusionConfig, "train": TrainConfig}


class ConfigFileError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(message if message.startswith(key) else f"{key}: {message}")


@dataclass
class RunConfig:
    data: GenConfig = field(default_factory=GenConfig)
    mltm: MltmConfig = field(default_factory=MltmConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def get(self, dotted: str):
        section, key = _split(dotted)
        return getattr(getattr(self, section), key)

    def set(self, dotted: str, value) -> None:
        section, key = _split(dotted)
        obj = getattr(self, section)
        ftype = {f.name: f.type for f in fields(obj)}[key]
        setattr(obj, key, _coerce(dotted, ftype, value))

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def validate(self) -> None:
        """Run each section's own checks, re-raising with the dotted key."""
        from medfuse.ehr_data import DataError
        from medfuse.fusion import ConfigError as FusionConfigError
        from medfuse.mltm import ConfigError as MltmConfigError

        checks = [
            ("data", self.data.validate),
            ("mltm", self.mltm.validate),
            ("fusion", self.fusion.validate),
            ("train", lambda: self.train.validate(self.fusion.lam)),
        ]
        for section, check in checks:
            try:
                check()
            except (DataError, FusionConfigError, MltmConfigError) as exc:
                msg = str(exc)
                key = msg.split()[0].rstrip(":") if "." in msg.split()[0] else section
                raise ConfigFileError(key, msg) from None


def _split(dotted: str) -> tuple[str, str]:
    section, _, key = dotted.partition(".")
    if section not in SECTIONS:
        raise ConfigFileError(dotted, f"unknown section {section!r}")
    if key not in {f.name for f in fields(SECTIONS[section])}:
        raise ConfigFileError(dotted, "unknown key")
    return section, key


def _coerce(dotted: str, ftype, value):
    type_name = ftype if isinstance(ftype, str) else ftype.__name__
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if type_name == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigFileError(dotted, f"cannot parse {text!r} as {type_name}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        parser[name] = {k: _format(v) for k, v in asdict(getattr(cfg, name)).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigFileError(source, str(exc)) from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigFileError(section, "unknown section")
        for key, value in parser[section].items():
            cfg.set(f"{section}.{key}", value)
    return cfg


def load(path: str | Path) -> RunConfig:
    return loads(Path(path).read_text(), source=str(path))


def save(path: str | Path, cfg: RunConfig) -> None:
    atomic_write_text(path, dumps(cfg))
