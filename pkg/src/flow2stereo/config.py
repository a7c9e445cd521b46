"""Plain key=value configuration files mapped onto the package's dataclasses.

Format: one `section.key = value` per line; `#` starts a comment; blank
lines ignored. Sections are scene, solver, loss, consistency, and selfsup.
Values are coerced to the type of the dataclass field they target; tuples
are comma-separated. Unknown sections or keys raise ConfigError so typos
fail loudly instead of silently running defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .losses import LossConfig
from .optimize import SolverConfig
from .scene_synth import ConfigError, SceneConfig
from .warp_consistency import ConsistencyConfig

SCENE_KINDS = ("depth_motion", "translating_patch")


@dataclass(frozen=True)
class PatchSceneConfig:
    """Knobs of the translating-patch generator (benign-motion scenes)."""

    width: int = 128
    height: int = 64
    f_prime: float = 180.0
    baseline: float = 0.35
    n_patches: int = 2
    base_depth: float = 10.0
    depth_gap: float = 0.2
    motion_x: float = 0.05
    motion_y: float = 0.02
    jitter: float = 0.005
    texture_base_cycles: float = 1.0 / 32.0
    texture_octaves: int = 3
    texture_contrast: float = 0.8
    seed: int = 0


@dataclass(frozen=True)
class SelfsupSettings:
    variant: str = "v2"
    seed: int = 0
    proxy_iterations: int = 0  # 0: v1's proxy pass reuses the solver budget


@dataclass(frozen=True)
class AppConfig:
    scene_kind: str = "depth_motion"
    scene: SceneConfig = SceneConfig()
    patch_scene: PatchSceneConfig = PatchSceneConfig()
    solver: SolverConfig = SolverConfig()
    loss: LossConfig = LossConfig()
    consistency: ConsistencyConfig = ConsistencyConfig()
    selfsup: SelfsupSettings = SelfsupSettings()


def parse_kv(text: str) -> dict:
    """key=value lines -> ordered dict of raw strings."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        val = val.strip()
        if not key:
            raise ConfigError(f"line {ln}: empty key")
        if key in out:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        out[key] = val
    return out


def _coerce_scalar(val: str, target, key: str):
    if target is bool or isinstance(target, bool):
        low = val.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {val!r}")
    try:
        if target is int or isinstance(target, int):
            return int(val)
        if target is float or isinstance(target, float):
            return float(val)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {val!r}") from None
    return val


def _coerce(val: str, default, key: str):
    """Coerce a raw string to the type of the field's default value."""
    if isinstance(default, tuple):
        if val == "":
            return ()
        parts = [p.strip() for p in val.split(",")]
        elems = []
        for p in parts:
            try:
                elems.append(int(p))
            except ValueError:
                try:
                    elems.append(float(p))
                except ValueError:
                    elems.append(p)
        return tuple(elems)
    if default is None:  # optional float (cx / cy)
        return _coerce_scalar(val, float, key)
    if isinstance(default, bool):
        return _coerce_scalar(val, bool, key)
    return _coerce_scalar(val, default, key)


def _build(cls, defaults, section: str, kv: dict):
    """Instantiate a config dataclass with the section's overrides applied."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    overrides = {}
    for key, val in kv.items():
        if not key.startswith(section + "."):
            continue
        name = key[len(section) + 1:]
        if name not in fields:
            raise ConfigError(f"unknown key {key!r} (no field {name!r} "
                              f"in the {section} section)")
        overrides[name] = _coerce(val, getattr(defaults, name), key)
    if not overrides:
        return defaults
    try:
        return dataclasses.replace(defaults, **overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {section} configuration: {exc}") from None


_SECTIONS = {
    "scene": (SceneConfig, "scene"),
    "patch_scene": (PatchSceneConfig, "patch_scene"),
    "solver": (SolverConfig, "solver"),
    "loss": (LossConfig, "loss"),
    "consistency": (ConsistencyConfig, "consistency"),
    "selfsup": (SelfsupSettings, "selfsup"),
}


def load_config(text: str, base: AppConfig = AppConfig()) -> AppConfig:
    """Parse a config file's text into an AppConfig."""
    kv = parse_kv(text)
    kind = kv.pop("scene.kind", base.scene_kind)
    if kind not in SCENE_KINDS:
        raise ConfigError(f"scene.kind must be one of {SCENE_KINDS}, "
                          f"got {kind!r}")
    for key in kv:
        section = key.split(".", 1)[0]
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in {key!r}")
    return AppConfig(
        scene_kind=kind,
        scene=_build(SceneConfig, base.scene, "scene", kv),
        patch_scene=_build(PatchSceneConfig, base.patch_scene, "patch_scene", kv),
        solver=_build(SolverConfig, base.solver, "solver", kv),
        loss=_build(LossConfig, base.loss, "loss", kv),
        consistency=_build(ConsistencyConfig, base.consistency, "consistency", kv),
        selfsup=_build(SelfsupSettings, base.selfsup, "selfsup", kv),
    )


def load_config_file(path: str, base: AppConfig = AppConfig()) -> AppConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return load_config(text, base)


def config_snapshot(cfg: AppConfig) -> dict:
    """JSON-ready nested dict of every setting (for run manifests)."""
    out = {"scene_kind": cfg.scene_kind}
    for section, (_, attr) in _SECTIONS.items():
        out[section] = dataclasses.asdict(getattr(cfg, attr))
    return out
