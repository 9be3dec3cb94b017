"""Flat ``key=value`` configuration files.

One assignment per line, ``#`` starts a comment, keys may carry a dotted
section prefix (``guide.Z=4000``). Restoration keys are looked up with or
without the ``guide.`` prefix.
"""

from __future__ import annotations

from .guide import RestoreConfig, preset_lambdas

GUIDE_KEYS = ("Z", "tau", "eta", "dt_check", "t_prime", "max_refine_rounds",
              "kld_variant", "task_preset", "seed", "z_mode", "stages")
EXTRA_KEYS = {"pcdm.lr": "pcdm_lr", "pcdm.target": "pcdm_target"}
# sections owned by other subcommands; guide.* and pcdm.* keys are checked individually
KNOWN_PREFIXES = ("prior.", "corpus.", "degrade.")


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _get(cfg: dict, key: str):
    for k in (key, "guide." + key):
        if k in cfg:
            return cfg[k]
    return None


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def restore_config(cfg: dict, seed=None) -> RestoreConfig:
    """Build a RestoreConfig; a task preset sets the lambdas, explicit
    ``lambdaN`` keys override single weights."""
    known = set(GUIDE_KEYS) | {f"lambda{i}" for i in range(1, 7)} | {"audit"}
    for key in cfg:
        bare = key[len("guide."):] if key.startswith("guide.") else key
        if bare not in known and key not in EXTRA_KEYS and not key.startswith(KNOWN_PREFIXES):
            raise ConfigError(f"unknown config key {key!r}")
    kw = {}
    task = _get(cfg, "task_preset")
    lam = list(preset_lambdas(task) if task else RestoreConfig().lambdas)
    if task:
        kw["task_preset"] = task
    for i in range(6):
        v = _get(cfg, f"lambda{i + 1}")
        if v is not None:
            lam[i] = float(v)
    kw["lambdas"] = tuple(lam)
    conv = {"Z": float, "tau": float, "eta": float, "dt_check": int, "t_prime": int,
            "max_refine_rounds": int, "kld_variant": str, "seed": int, "z_mode": str}
    try:
        for key, fn in conv.items():
            v = _get(cfg, key)
            if v is not None:
                kw[key] = fn(v)
        v = _get(cfg, "stages")
        if v is not None:
            kw["stage_bounds"] = tuple(int(s) for s in v.split(","))
        v = _get(cfg, "audit")
        if v is not None:
            kw["audit"] = _bool(v)
        for key, field_name in EXTRA_KEYS.items():
            if key in cfg:
                kw[field_name] = float(cfg[key]) if field_name == "pcdm_lr" else cfg[key]
        if seed is not None:
            kw["seed"] = int(seed)
        return RestoreConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def get_int(cfg: dict, key: str, default: int) -> int:
    v = cfg.get(key)
    try:
        return default if v is None else int(v)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
