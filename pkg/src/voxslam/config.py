"""key=value config files with typed lookup and strict key checking."""

import numpy as np


class ConfigError(ValueError):
    pass


def _parse_value(text):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if "," in text:
        return tuple(_parse_value(p) for p in text.split(","))
    return text


def parse_config_text(text, source="<config>"):
    out = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{ln}: empty key")
        out[key] = _parse_value(value)
    return out


def load_config(path):
    with open(path) as f:
        return parse_config_text(f.read(), source=path)


def apply_overrides(cfg, overrides, source="--set"):
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"{source}: expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _parse_value(value)
    return cfg


def check_keys(cfg, allowed, source="config"):
    """Reject unknown keys by name; typos should never pass silently."""
    for key in cfg:
        if key not in allowed:
            raise ConfigError(f"{source}: unknown key '{key}'")
    return cfg


def get_tuple(cfg, key, default, n=None):
    v = cfg.get(key, default)
    if np.isscalar(v):
        v = (v,)
    v = tuple(float(x) for x in v)
    if n is not None and len(v) != n:
        raise ConfigError(f"key '{key}' needs {n} comma-separated values")
    return v
