"""Experiment configuration: a sectioned key=value file read with configparser.

Every key has a default except ``[experiment] methods``. Errors carry the
offending ``section.key`` so the CLI can name it.

    [stream]      num_tasks classes_per_task samples_per_class dim mean_scale noise_scale batch_size
    [model]       hidden embed_dim
    [hyper]       alpha beta n_min lr replay_batch_size
    [schedule]    tau tau_max tau_min cycle
    [experiment]  methods seeds buffer_sizes out eval_every grad_audit embeddings
    [tau_sweep]   tau_max tau_min cycle   (comma-separated grids)
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .datastream import StreamConfig
from .errors import ConfigError
from .losses import HyperParams, TemperatureSchedule
from .trainer import METHODS, MethodSpec, ModelConfig

_STREAM_KEYS = {
    "num_tasks": int,
    "classes_per_task": int,
    "samples_per_class": int,
    "dim": int,
    "mean_scale": float,
    "noise_scale": float,
    "batch_size": int,
}
_HYPER_KEYS = {"alpha": float, "beta": float, "n_min": int, "lr": float, "replay_batch_size": int}
_SCHEDULE_KEYS = {"tau": float, "tau_max": float, "tau_min": float, "cycle": int}


@dataclass
class TauGrid:
    tau_max: list[float] = field(default_factory=lambda: [0.16])
    tau_min: list[float] = field(default_factory=lambda: [0.05])
    cycle: list[int] = field(default_factory=lambda: [500])

    def cells(self) -> list[tuple[float, float, int]]:
        return [(hi, lo, s) for hi in self.tau_max for lo in self.tau_min for s in self.cycle]


@dataclass
class ExperimentConfig:
    methods: list[str]
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    hp: HyperParams = field(default_factory=HyperParams)
    schedule: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    seeds: list[int] = field(default_factory=lambda: [0])
    buffer_sizes: list[int] = field(default_factory=lambda: [200])
    out: str = "results"
    eval_every: int = 0
    grad_audit: bool = False
    embeddings: bool = False
    tau_grid: TauGrid = field(default_factory=TauGrid)

    def validate(self) -> None:
        if not self.methods:
            raise ConfigError("at least one method is required", "experiment.methods")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}", "experiment.methods")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must be unique", "experiment.methods")
        if not self.seeds:
            raise ConfigError("at least one seed is required", "experiment.seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be unique", "experiment.seeds")
        if not self.buffer_sizes or any(b < 0 for b in self.buffer_sizes):
            raise ConfigError("buffer sizes must be non-negative", "experiment.buffer_sizes")
        if len(set(self.buffer_sizes)) != len(self.buffer_sizes):
            raise ConfigError("buffer sizes must be unique", "experiment.buffer_sizes")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0", "experiment.eval_every")
        for name, obj in (("stream", self.stream), ("hyper", self.hp), ("schedule", self.schedule)):
            try:
                obj.validate()
            except ConfigError as e:
                raise ConfigError(str(e), f"{name}.{e.field}" if e.field else name) from None
        try:
            self.model.validate()
        except ConfigError as e:
            raise ConfigError(str(e), "model.hidden") from None
        for hi, lo, s in self.tau_grid.cells():
            try:
                TemperatureSchedule(hi, lo, s, self.schedule.tau).validate()
            except ConfigError as e:
                raise ConfigError(str(e), f"tau_sweep.{e.field or 'tau_max'}") from None

    def spec(self, method: str, buffer_size: int, schedule: TemperatureSchedule | None = None) -> MethodSpec:
        hp = dataclasses.replace(self.hp, buffer_size=buffer_size, batch_size=self.stream.batch_size)
        return MethodSpec(method, hp=hp, schedule=schedule or self.schedule)

    def stream_for(self, seed: int) -> StreamConfig:
        return dataclasses.replace(self.stream, seed=seed)


def _convert(section: str, key: str, raw: str, kind):
    try:
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__}", f"{section}.{key}") from None


def _list(section: str, key: str, raw: str, kind) -> list:
    parts = [p for p in (s.strip() for s in raw.split(",")) if p]
    return [_convert(section, key, p, kind) for p in parts]


def _bool(section: str, key: str, raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot parse {raw!r} as a boolean", f"{section}.{key}")


def _section(cp: configparser.ConfigParser, name: str, allowed) -> dict[str, str]:
    if not cp.has_section(name):
        return {}
    items = dict(cp.items(name))
    for key in items:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r}", f"{name}.{key}")
    return items


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    known = {"stream", "model", "hyper", "schedule", "experiment", "tau_sweep"}
    for name in cp.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]", name)

    stream = {
        k: _convert("stream", k, v, _STREAM_KEYS[k]) for k, v in _section(cp, "stream", _STREAM_KEYS).items()
    }
    model_raw = _section(cp, "model", {"hidden", "embed_dim"})
    model = ModelConfig(
        hidden=tuple(_list("model", "hidden", model_raw["hidden"], int)) if "hidden" in model_raw else (64, 64),
        embed_dim=_convert("model", "embed_dim", model_raw["embed_dim"], int) if "embed_dim" in model_raw else 32,
    )
    hyper = {k: _convert("hyper", k, v, _HYPER_KEYS[k]) for k, v in _section(cp, "hyper", _HYPER_KEYS).items()}
    sched = {
        k: _convert("schedule", k, v, _SCHEDULE_KEYS[k]) for k, v in _section(cp, "schedule", _SCHEDULE_KEYS).items()
    }

    exp = _section(cp, "experiment", {"methods", "seeds", "buffer_sizes", "out", "eval_every", "grad_audit", "embeddings"})
    if "methods" not in exp:
        raise ConfigError("missing required field", "experiment.methods")
    grid_raw = _section(cp, "tau_sweep", {"tau_max", "tau_min", "cycle"})
    grid = TauGrid()
    if "tau_max" in grid_raw:
        grid.tau_max = _list("tau_sweep", "tau_max", grid_raw["tau_max"], float)
    if "tau_min" in grid_raw:
        grid.tau_min = _list("tau_sweep", "tau_min", grid_raw["tau_min"], float)
    if "cycle" in grid_raw:
        grid.cycle = _list("tau_sweep", "cycle", grid_raw["cycle"], int)

    cfg = ExperimentConfig(
        methods=[m.strip() for m in exp["methods"].split(",") if m.strip()],
        stream=StreamConfig(**stream),
        model=model,
        hp=HyperParams(**hyper),
        schedule=TemperatureSchedule(**sched),
        seeds=_list("experiment", "seeds", exp["seeds"], int) if "seeds" in exp else [0],
        buffer_sizes=_list("experiment", "buffer_sizes", exp["buffer_sizes"], int) if "buffer_sizes" in exp else [200],
        out=exp.get("out", "results").strip(),
        eval_every=_convert("experiment", "eval_every", exp["eval_every"], int) if "eval_every" in exp else 0,
        grad_audit=_bool("experiment", "grad_audit", exp["grad_audit"]) if "grad_audit" in exp else False,
        embeddings=_bool("experiment", "embeddings", exp["embeddings"]) if "embeddings" in exp else False,
        tau_grid=grid,
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", "config") from None
    return parse_config(text)


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Effective config with every default filled in; parses back to ``cfg``."""
    s, h, t, g = cfg.stream, cfg.hp, cfg.schedule, cfg.tau_grid
    sections = {
        "stream": {k: getattr(s, k) for k in _STREAM_KEYS},
        "model": {"hidden": list(cfg.model.hidden), "embed_dim": cfg.model.embed_dim},
        "hyper": {k: getattr(h, k) for k in _HYPER_KEYS},
        "schedule": {k: getattr(t, k) for k in _SCHEDULE_KEYS},
        "experiment": {
            "methods": cfg.methods,
            "seeds": cfg.seeds,
            "buffer_sizes": cfg.buffer_sizes,
            "out": cfg.out,
            "eval_every": cfg.eval_every,
            "grad_audit": cfg.grad_audit,
            "embeddings": cfg.embeddings,
        },
        "tau_sweep": {"tau_max": g.tau_max, "tau_min": g.tau_min, "cycle": g.cycle},
    }
    lines = []
    for name, kv in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {_fmt(v)}" for k, v in kv.items()]
        lines.append("")
    return "\n".join(lines)
