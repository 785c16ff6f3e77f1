"""Versioned INI experiment configs and derived seeds.

A config file is plain ``configparser`` INI with a mandatory ``[meta]``
section carrying ``version``. Every other section maps onto one dataclass
(``model``, ``ssl``, ``finetune``, ``experiment``); unknown keys are config
errors so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import hashlib
import io
from pathlib import Path

from .errors import ConfigError

CONFIG_VERSION = 1


@dataclasses.dataclass
class ExperimentConfig:
    """Command-level parameters; model/SSL/fine-tune settings live in their own sections."""

    datasets: tuple = ()
    unlabeled: tuple = ()
    class_count: int = 5
    image_size: int = 32
    expansion_k: int = 0
    policy: str = "unfrozen"
    checkpoint: str = ""
    replicates: int = 5
    fewshot_grid: tuple = (1, 2, 4, 8, 16, 32, 64, 128)
    sweep_axis: str = ""
    sweep_values: tuple = ()
    synth_datasets: int = 1
    synth_n_per_class: int = 40
    synth_domain: int = 0
    filter_quality: bool = False
    knn_k: int = 20


def derive_seed(root: int, role: str, index: int = 0) -> int:
    """Stable 32-bit seed for one RNG consumer, from (root seed, role name, index)."""
    h = hashlib.sha256(f"{int(root)}:{role}:{int(index)}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        if raw == "":
            return ()
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and all(isinstance(d, (int, float)) for d in default):
            kind = type(default[0])
            try:
                return tuple(kind(ast.literal_eval(i)) for i in items)
            except (ValueError, SyntaxError):
                raise ConfigError(f"expected numbers, got {raw!r}") from None
        return tuple(_literal(i) for i in items)
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}") from None
    if isinstance(default, float) or default is None:
        if raw.lower() in ("", "none"):
            return None
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}") from None
    return raw


def _literal(s: str):
    try:
        return ast.literal_eval(s)
    except (ValueError, SyntaxError):
        return s


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    if v is None:
        return "none"
    if hasattr(v, "value"):
        return str(v.value)
    if dataclasses.is_dataclass(v):
        raise ConfigError("nested dataclasses are not representable in INI")
    return str(v)


def apply_section(obj, section: dict, name: str):
    """Return a copy of dataclass ``obj`` with string values from ``section`` applied."""
    fields = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    nested = {}
    for key, raw in section.items():
        if "." in key:
            head, sub = key.split(".", 1)
            if head not in fields or not dataclasses.is_dataclass(getattr(obj, head)):
                raise ConfigError(f"[{name}] unknown key {key!r}")
            nested.setdefault(head, {})[sub] = raw
            continue
        if key not in fields:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        default = getattr(obj, key)
        if hasattr(default, "value") and not isinstance(default, (bool, int, float)):
            updates[key] = raw.strip()
        else:
            try:
                updates[key] = _parse_value(raw, default)
            except ConfigError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from None
    for head, sub in nested.items():
        updates[head] = apply_section(getattr(obj, head), sub, f"{name}.{head}")
    try:
        return dataclasses.replace(obj, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def read_ini(path) -> dict:
    """Parse an INI file into ``{section: {key: raw string}}`` after checking ``[meta] version``."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not cp.has_section("meta") or not cp.has_option("meta", "version"):
        raise ConfigError(f"{path}: missing [meta] version")
    try:
        version = int(cp.get("meta", "version"))
    except ValueError:
        raise ConfigError(f"{path}: [meta] version must be an integer") from None
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: config version {version}, expected {CONFIG_VERSION}")
    return {s: dict(cp.items(s)) for s in cp.sections() if s != "meta"}


def dump_ini(sections: dict) -> str:
    """Render ``{section: dataclass or dict}`` as INI text with every field written out."""
    cp = configparser.ConfigParser(interpolation=None)
    cp["meta"] = {"version": str(CONFIG_VERSION)}
    for name in sorted(sections):
        obj = sections[name]
        items = dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else dict(obj)
        flat = {}
        for k, v in items.items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    flat[f"{k}.{kk}"] = _format_value(vv)
            else:
                flat[k] = _format_value(getattr(obj, k, v) if dataclasses.is_dataclass(obj) else v)
        cp[name] = flat
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


__all__ = ["CONFIG_VERSION", "ExperimentConfig", "derive_seed", "apply_section", "read_ini", "dump_ini"]
