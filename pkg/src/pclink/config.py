"""Flat key=value config files and typed dataclass builders.

One run config file carries the codec, link, and training settings in a single
flat namespace; unrelated keys are ignored by each builder so the same file can
feed every stage of a run.
"""
from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path


def read_kv(path) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def write_kv(path, mapping: dict) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def content_hash(mapping: dict) -> str:
    """Content hash of a config mapping (stable across key insertion order)."""
    canon = "\n".join(f"{k}={format_value(mapping[k])}" for k in sorted(mapping))
    blob = f"config {len(canon)}\0{canon}".encode()
    return hashlib.sha1(blob).hexdigest()


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _convert(raw: str, typ):
    if typ is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"cannot parse {raw!r} as bool")
    if typ is int:
        return int(raw)
    if typ is float:
        if raw.lower() in ("inf", "+inf", "infinity"):
            return float("inf")
        return float(raw)
    if typ is str:
        return raw
    raise ValueError(f"unsupported config field type {typ}")


def build_dataclass(cls, mapping: dict[str, str], **overrides):
    """Instantiate `cls` from the flat mapping, taking only the fields it declares.

    Tuple fields are parsed from comma-separated values; unknown keys are left
    for other builders.
    """
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in overrides:
            kwargs[f.name] = overrides[f.name]
            continue
        if f.name not in mapping:
            continue
        raw = mapping[f.name]
        typ = f.type if isinstance(f.type, type) else None
        name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if typ is None:
            # dataclasses under `from __future__ import annotations` carry string types
            if name.startswith("tuple"):
                kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x.strip())
                continue
            typ = {"int": int, "float": float, "bool": bool, "str": str}.get(name)
        if typ is None:
            raise ValueError(f"cannot build field {f.name!r} of type {f.type!r} from config")
        kwargs[f.name] = _convert(raw, typ)
    for k, v in overrides.items():
        kwargs.setdefault(k, v)
    return cls(**kwargs)


def dataclass_mapping(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
