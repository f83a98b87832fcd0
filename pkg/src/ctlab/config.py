"""
Scenario files (TOML).

Top level: ``seed`` (mandatory), optional ``name``, a ``[table6]`` block
keyed by the published population parameter names, or a ``[world]`` block with
placed ``[[world.device]]`` entries, and an ``[attack]`` block whose
``kind`` selects the pipeline.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ctlab.world.model import ConfigError, Table6Params
from ctlab.world.sim import DeviceSpec, WorldConfig

ATTACK_KINDS = ("simulate", "isolation", "pollution", "deanon", "coverage")

# published parameter name -> Table6Params field
TABLE6_KEYS = {
    "Population": "population",
    "Infection Rate": "infection_rate",
    "Time": "time",
    "Duration": "duration",
    "Encounter Count": "encounter_count",
    "# of tags": "tags",
    "# of infected tags": "infected_tags",
    "Frequency(WiFi Probing)": "wifi_frequency",
    "Frequency(Bluetooth)": "bt_frequency",
    "Speed": "speed",
    "r_wifi": "r_wifi",
    "r_bt": "r_bt",
}
# knobs outside the published parameter set
TABLE6_EXTRA = ("sensors", "sensor_spacing", "scan_interval", "unsafe")

_RANGE_FIELDS = {"duration", "encounter_count", "wifi_frequency", "bt_frequency", "speed"}
_TIME_RE = re.compile(r"^\s*(\d{1,2}):(\d{2})\s*-\s*(\d{1,2}):(\d{2})\s*(?:,\s*(\d+)\s*days?)?\s*$")

DEVICE_FIELDS = {"name", "pos", "waypoints", "bt_rate", "wifi_rate", "wifi_enabled", "infected",
                 "role", "bt_range", "ssid"}
WORLD_FIELDS = {"duration", "start_time", "r_bt", "r_wifi", "tick", "max_gap", "device", "unsafe"}


def parse_time(value) -> tuple[tuple[float, float], ...]:
    """``"16:00-18:00, 2 days"`` -> that window on each day, in seconds."""
    if isinstance(value, str):
        m = _TIME_RE.match(value)
        if not m:
            raise ConfigError(f"table6.Time: cannot parse {value!r}")
        h1, m1, h2, m2, days = m.groups()
        lo, hi = int(h1) * 3600 + int(m1) * 60, int(h2) * 3600 + int(m2) * 60
        if hi <= lo:
            raise ConfigError("table6.Time: window must end after it starts")
        return tuple((d * 86400.0 + lo, d * 86400.0 + hi) for d in range(int(days or 1)))
    try:
        return tuple((float(a), float(b)) for a, b in value)
    except (TypeError, ValueError):
        raise ConfigError("table6.Time: expected 'HH:MM-HH:MM, N days' or [[start, end], ...]") from None


def _percent(value, name):
    if isinstance(value, str) and value.strip().endswith("%"):
        try:
            return float(value.strip()[:-1]) / 100
        except ValueError:
            raise ConfigError(f"{name}: bad percentage {value!r}") from None
    return float(value)


def parse_table6(block: dict) -> Table6Params:
    kwargs: dict[str, Any] = {}
    for key, value in block.items():
        name = f"table6.{key}"
        if key in TABLE6_KEYS:
            fld = TABLE6_KEYS[key]
        elif key in TABLE6_EXTRA:
            fld = key
        else:
            raise ConfigError(f"{name}: unknown parameter")
        try:
            if fld == "time":
                value = parse_time(value)
            elif fld == "infection_rate":
                value = _percent(value, name)
            elif fld in _RANGE_FIELDS:
                lo, hi = value
                value = (int(lo), int(hi)) if fld == "encounter_count" else (float(lo), float(hi))
            elif fld in ("population", "tags", "infected_tags", "sensors"):
                value = int(value)
            elif fld == "unsafe":
                value = bool(value)
            else:
                value = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: bad value {value!r}") from None
        kwargs[fld] = value
    try:
        return Table6Params(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"table6: {exc}") from None


def parse_world(block: dict) -> WorldConfig:
    unknown = set(block) - WORLD_FIELDS
    if unknown:
        raise ConfigError(f"world.{sorted(unknown)[0]}: unknown field")
    unsafe = bool(block.get("unsafe", False))
    specs = []
    for k, dev in enumerate(block.get("device", [])):
        where = f"world.device[{k}]"
        bad = set(dev) - DEVICE_FIELDS
        if bad:
            raise ConfigError(f"{where}.{sorted(bad)[0]}: unknown field")
        if "name" not in dev:
            raise ConfigError(f"{where}.name: missing")
        if not unsafe:
            # default ranges apply to user phones unless explicitly overridden
            if "bt_rate" in dev and not 3 <= dev["bt_rate"] <= 10:
                raise ConfigError(f"{where}.bt_rate: outside default range 3-10")
            if "wifi_rate" in dev and not 15 <= dev["wifi_rate"] <= 75:
                raise ConfigError(f"{where}.wifi_rate: outside default range 15-75")
        if dev.get("bt_range") is not None and not 0 < dev["bt_range"] <= 100:
            raise ConfigError(f"{where}.bt_range: must be in (0, 100]")
        try:
            specs.append(DeviceSpec(
                name=str(dev["name"]),
                pos=tuple(dev["pos"]) if "pos" in dev else None,
                waypoints=dev.get("waypoints"),
                bt_rate=float(dev.get("bt_rate", 5.0)),
                wifi_rate=float(dev.get("wifi_rate", 30.0)),
                wifi_enabled=bool(dev.get("wifi_enabled", True)),
                infected=bool(dev.get("infected", False)),
                role=str(dev.get("role", "user")),
                bt_range=dev.get("bt_range"),
                ssid=dev.get("ssid"),
            ))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
        if specs[-1].pos is None and not specs[-1].waypoints:
            raise ConfigError(f"{where}.pos: device needs pos or waypoints")
    kw = {k: float(block[k]) for k in ("duration", "start_time", "r_bt", "r_wifi", "tick", "max_gap")
          if k in block}
    try:
        return WorldConfig(specs, **kw)
    except ConfigError as exc:
        raise ConfigError(f"world: {exc}") from None


@dataclass
class ScenarioConfig:
    seed: int
    attack: dict
    name: str = ""
    table6: Table6Params | None = None
    world: WorldConfig | None = None
    output: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    @property
    def kind(self) -> str:
        return self.attack["kind"]

    def scenario_hash(self) -> str:
        """Binds a report to the exact parsed config, seed included."""
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


_ATTACK_FIELDS = {
    "simulate": {"events"},
    "isolation": {"attackers", "diagnosed", "pools", "rounds_max", "mode", "firewall_threshold",
                  "rotate_sources", "sessions"},
    "pollution": {"attackers", "diagnosed", "sites", "victims_per_site", "extender_range",
                  "site_distance", "slot_ms", "max_interval_ms", "duration"},
    "deanon": {"seeds", "sweep", "values", "workers", "curve"},
    "coverage": {"poi", "fixture", "city", "population", "overlap_grid", "radius_grid", "matrix"},
}


def _validate_attack(attack: dict, cfg: ScenarioConfig) -> None:
    kind = attack.get("kind")
    if kind not in ATTACK_KINDS:
        raise ConfigError(f"attack.kind: must be one of {ATTACK_KINDS}, got {kind!r}")
    bad = set(attack) - _ATTACK_FIELDS[kind] - {"kind"}
    if bad:
        raise ConfigError(f"attack.{sorted(bad)[0]}: unknown field for kind {kind!r}")
    names = {d.name for d in cfg.world.devices} if cfg.world else set()
    if kind in ("isolation", "pollution") and "sites" not in attack:
        if cfg.world is None:
            raise ConfigError(f"world: required for attack kind {kind!r}")
        attackers = attack.get("attackers")
        if not attackers:
            raise ConfigError("attack.attackers: at least one attacker device required")
        for a in attackers:
            a_name = a if isinstance(a, str) else a.get("name")
            if a_name not in names:
                raise ConfigError(f"attack.attackers: {a_name!r} is not a world device")
        for d in attack.get("diagnosed", []):
            if d not in names:
                raise ConfigError(f"attack.diagnosed: {d!r} is not a world device")
    if kind == "isolation" and int(attack.get("pools", 10)) < 2:
        raise ConfigError("attack.pools: must be >= 2")
    if kind == "deanon":
        if cfg.table6 is None:
            cfg.table6 = Table6Params()
        if attack.get("sweep") is not None and not attack.get("values"):
            raise ConfigError("attack.values: required with attack.sweep")
    if kind == "simulate" and cfg.world is None and cfg.table6 is None:
        raise ConfigError("world: a [world] or [table6] block is required for simulate")
    if kind == "coverage":
        if "poi" not in attack and "fixture" not in attack:
            raise ConfigError("attack.poi: a POI csv path or attack.fixture is required")
        if "population" not in attack and "fixture" not in attack:
            raise ConfigError("attack.population: required")


def parse_config(data: dict, base_dir: Path | None = None) -> ScenarioConfig:
    top = set(data) - {"seed", "name", "table6", "world", "attack", "output"}
    if top:
        raise ConfigError(f"{sorted(top)[0]}: unknown top-level key")
    if "seed" not in data:
        raise ConfigError("seed: mandatory")
    if not isinstance(data["seed"], int) or isinstance(data["seed"], bool) or data["seed"] < 0:
        raise ConfigError("seed: must be a non-negative integer")
    if "attack" not in data:
        raise ConfigError("attack: block required")
    cfg = ScenarioConfig(
        seed=data["seed"],
        attack=dict(data["attack"]),
        name=str(data.get("name", "")),
        table6=parse_table6(data["table6"]) if "table6" in data else None,
        world=parse_world(data["world"]) if "world" in data else None,
        output=dict(data.get("output", {})),
        raw=data,
        base_dir=base_dir or Path.cwd(),
    )
    _validate_attack(cfg.attack, cfg)
    return cfg


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fp:
            data = tomllib.load(fp)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, path.parent)


def bundled_config(name: str) -> Path:
    return Path(__file__).parent / "configs" / name
