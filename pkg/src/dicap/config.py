"""INI experiment configuration with strict validation.

Every section and key is declared in :data:`SCHEMA`; anything else is an
error.  Values are typed by their declared default: bool, int, float, str,
int tuples (layer widths, comma separated) and float lists (comma separated).
"""

from __future__ import annotations

import configparser
import copy
import io
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .channels import ChannelSpec
from .policy import MiTrainConfig, PolicyGradConfig
from .qgraph import BoundConfig, QNetConfig

COMMANDS = ("estimate", "optimize", "qgraph", "shape", "oracle", "lemma2")


class ConfigError(ValueError):
    pass


class FloatList(tuple):
    """Marker type for comma-separated float lists."""


class IntTuple(tuple):
    """Marker type for comma-separated int tuples."""


def _dataclass_defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        v = f.default
        out[f.name] = IntTuple(v) if isinstance(v, tuple) else v
    return out


SCHEMA: dict[str, dict] = {
    "run": {"command": "", "seed": 0, "workers": 1, "out": "runs/out", "estimator": "dine"},
    "channel": {
        "kind": "bsc",
        "p": 0.5,
        "eta": 0.0,
        "b": 0.1,
        "g": 0.3,
        "p_good": 0.1,
        "p_bad": 0.4,
        "feedback": False,
    },
    "estimate": {"pmf": FloatList()},
    "train": _dataclass_defaults(PolicyGradConfig),
    "mine": _dataclass_defaults(MiTrainConfig),
    "qgraph": {
        "policy": "learned",
        "k_min": 2,
        "k_max": 6,
        "n_extract": 100_000,
        "purity": 0.99,
        "qnet_iterations": QNetConfig.iterations,
        "qnet_lanes": QNetConfig.lanes,
        "qnet_seg_len": QNetConfig.seg_len,
        "qnet_lr": QNetConfig.lr,
        **{f"bound_{k}": v for k, v in _dataclass_defaults(BoundConfig).items()},
    },
    "shaping": {
        "constellation": "pam",
        "order": 16,
        "amplitude": 1.0,
        "snr_db": FloatList((-10.0, 0.0, 10.0, 20.0, 30.0)),
        "quadrature_order": 64,
    },
    "sweep": {"points": ""},
    "lemma2": {"m_max": 20, "outputs": IntTuple((2, 3, 4))},
}


def _parse_value(section: str, key: str, raw: str):
    default = SCHEMA[section][key]
    text = raw.strip()
    where = f"[{section}] {key}"
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, FloatList):
            return FloatList(float(v) for v in text.split(",") if v.strip())
        if isinstance(default, IntTuple):
            return IntTuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(f"{where}: expected {kind}, got {raw!r}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentConfig:
    values: dict  # section -> key -> typed value

    # construction ---------------------------------------------------
    @classmethod
    def defaults(cls) -> "ExperimentConfig":
        return cls(copy.deepcopy(SCHEMA))

    @classmethod
    def from_ini(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparseable config: {exc}") from None
        cfg = base.copy() if base else cls.defaults()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"[{section}]: unknown section")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"[{section}] {key}: unknown key")
                cfg.values[section][key] = _parse_value(section, key, raw)
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_ini(text)

    @classmethod
    def from_preset(cls, name: str) -> "ExperimentConfig":
        return cls.from_ini(preset_text(name))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls.defaults()
        for section, items in d.items():
            if section not in SCHEMA:
                raise ConfigError(f"[{section}]: unknown section")
            for key, v in items.items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"[{section}] {key}: unknown key")
                cfg.values[section][key] = _parse_value(section, key, _format_value(v) if not isinstance(v, str) else v)
        return cfg

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig(copy.deepcopy(self.values))

    def set(self, dotted: str, raw: str) -> None:
        section, _, key = dotted.partition(".")
        if section not in SCHEMA:
            raise ConfigError(f"[{section}]: unknown section")
        if key not in SCHEMA[section]:
            raise ConfigError(f"[{section}] {key}: unknown key")
        self.values[section][key] = _parse_value(section, key, raw)

    # serialization ---------------------------------------------------
    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, items in self.values.items():
            parser[section] = {k: _format_value(v) for k, v in items.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        def plain(v):
            return list(v) if isinstance(v, tuple) else v

        return {s: {k: plain(v) for k, v in items.items()} for s, items in self.values.items()}

    # typed views -----------------------------------------------------
    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def command(self) -> str:
        return self.values["run"]["command"]

    def channel_spec(self, **override) -> ChannelSpec:
        c = {k: v for k, v in self.values["channel"].items() if k not in ("kind", "feedback")}
        c.update(override)
        try:
            return ChannelSpec(self.values["channel"]["kind"], **c)
        except ValueError as exc:
            raise ConfigError(f"[channel] {exc}") from None

    def policy_grad_config(self) -> PolicyGradConfig:
        try:
            return PolicyGradConfig(**self.values["train"])
        except ValueError as exc:
            raise ConfigError(f"[train] {exc}") from None

    def mi_train_config(self) -> MiTrainConfig:
        try:
            return MiTrainConfig(**self.values["mine"])
        except ValueError as exc:
            raise ConfigError(f"[mine] {exc}") from None

    def qnet_config(self) -> QNetConfig:
        q = self.values["qgraph"]
        try:
            return QNetConfig(lanes=q["qnet_lanes"], seg_len=q["qnet_seg_len"], iterations=q["qnet_iterations"], lr=q["qnet_lr"])
        except ValueError as exc:
            raise ConfigError(f"[qgraph] {exc}") from None

    def bound_config(self) -> BoundConfig:
        q = self.values["qgraph"]
        return BoundConfig(**{f.name: q[f"bound_{f.name}"] for f in fields(BoundConfig)})

    def sweep_points(self) -> list[dict]:
        """``points = b=0.05, g=0.15; b=0.1, g=0.3`` -> list of channel overrides."""
        text = self.values["sweep"]["points"].strip()
        if not text:
            return [{}]
        out = []
        for chunk in text.split(";"):
            point = {}
            for item in chunk.split(","):
                if not item.strip():
                    continue
                key, sep, raw = item.partition("=")
                key = key.strip()
                if not sep or key not in SCHEMA["channel"] or key in ("kind", "feedback"):
                    raise ConfigError(f"[sweep] points: bad assignment {item.strip()!r}")
                point[key] = _parse_value("channel", key, raw)
            out.append(point)
        return out

    def validate(self) -> None:
        """Check every field before dispatch."""
        run = self.values["run"]
        if run["command"] not in COMMANDS:
            raise ConfigError(f"[run] command: expected one of {', '.join(COMMANDS)}, got {run['command']!r}")
        if run["estimator"] not in ("dine", "mine"):
            raise ConfigError(f"[run] estimator: expected dine or mine, got {run['estimator']!r}")
        if run["workers"] < 1:
            raise ConfigError("[run] workers: must be >= 1")
        for point in self.sweep_points():
            self.channel_spec(**point)
        self.policy_grad_config()
        self.mi_train_config()
        self.qnet_config()
        q = self.values["qgraph"]
        if q["policy"] not in ("learned", "uniform"):
            raise ConfigError(f"[qgraph] policy: expected learned or uniform, got {q['policy']!r}")
        if not 1 <= q["k_min"] <= q["k_max"]:
            raise ConfigError("[qgraph] k_min/k_max: need 1 <= k_min <= k_max")
        if q["n_extract"] < 100_000:
            raise ConfigError("[qgraph] n_extract: must be >= 100000")
        sh = self.values["shaping"]
        if sh["constellation"] not in ("pam", "qam"):
            raise ConfigError(f"[shaping] constellation: expected pam or qam, got {sh['constellation']!r}")
        if sh["quadrature_order"] < 20:
            raise ConfigError("[shaping] quadrature_order: must be >= 20")
        if not sh["snr_db"]:
            raise ConfigError("[shaping] snr_db: empty grid")
        pmf = self.values["estimate"]["pmf"]
        if pmf and (min(pmf) < 0 or abs(sum(pmf) - 1.0) > 1e-9):
            raise ConfigError("[estimate] pmf: must be a probability vector")
        lm = self.values["lemma2"]
        if lm["m_max"] < 1 or not lm["outputs"] or min(lm["outputs"]) < 2:
            raise ConfigError("[lemma2]: need m_max >= 1 and output sizes >= 2")


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("dicap.presets").iterdir() if p.name.endswith(".ini"))


def preset_text(name: str) -> str:
    path = resources.files("dicap.presets") / f"{name}.ini"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return path.read_text()
