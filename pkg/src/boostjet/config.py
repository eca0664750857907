"""Run configuration: flat ``key = value`` files, overrides and stage hashes."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datamodel import SynthConfig
from .errors import BoostJetError, ConfigError
from .gbm import GbmTrainConfig
from .offer2vec import DmTrainConfig
from .pipeline import PipelineConfig

STAGES = ("gen", "trackers", "embed", "pool", "train", "recommend", "eval")

# stage -> (config sections it reads, upstream stages)
STAGE_INPUTS = {
    "gen": (("synth",), ()),
    "trackers": (("window", "schema", "tracker"), ("gen",)),
    "embed": (("window", "embed", "session"), ("gen",)),
    "pool": (("pool",), ("trackers", "embed")),
    "train": (("gbm", "split"), ("pool",)),
    "recommend": (("candidates",), ("train",)),
    "eval": ((), ("recommend",)),
}

_SECTION_KEYS = {
    "tracker": ("pipeline.n_price_bins", "pipeline.region_bin_a", "pipeline.region_bin_b"),
    "session": ("pipeline.delta", "pipeline.per_shop"),
    "pool": ("pipeline.n_neg", "pipeline.k_init"),
    "split": ("pipeline.eval_fraction",),
    "candidates": ("pipeline.k_init", "pipeline.k_final", "pipeline.n_pers"),
}


@dataclass(frozen=True)
class WindowConfig:
    ratios: tuple = (12, 1, 1)
    feature_end: int | None = None
    train_end: int | None = None


@dataclass(frozen=True)
class RunConfig:
    work_dir: str = "work"
    events: str = ""
    catalog: str = ""
    schema: str = ""
    seed: int = 0
    threads: int = 1
    synth: SynthConfig = field(default_factory=SynthConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    embed: DmTrainConfig = field(default_factory=DmTrainConfig)
    gbm: GbmTrainConfig = field(default_factory=GbmTrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    # -- paths ---------------------------------------------------------
    @property
    def work(self):
        return Path(self.work_dir)

    @property
    def events_path(self):
        return Path(self.events) if self.events else self.work / "events.tsv"

    @property
    def catalog_path(self):
        return Path(self.catalog) if self.catalog else self.work / "catalog.tsv"

    # -- flat view -------------------------------------------------------
    def items(self):
        """Every setting as (dotted key, value) in a fixed order."""
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in fields(v):
                    if f.name in ("synth", "embed", "gbm") and g.name == "seed":
                        continue  # derived from the global seed
                    out.append((f"{f.name}.{g.name}", getattr(v, g.name)))
            else:
                out.append((f.name, v))
        return out

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def validate(self):
        try:
            self.synth.validate()
            self.embed.validate()
            self.gbm.validate()
        except BoostJetError as e:
            raise ConfigError(str(e)) from None
        except ValueError as e:
            raise ConfigError(str(e)) from None
        p = self.pipeline
        if min(p.k_init, p.k_final) < 1 or p.n_pers < 0 or p.n_neg < 1 or p.delta < 0:
            raise ConfigError("k_init, k_final and n_neg must be >= 1; n_pers and delta >= 0")
        if not 0 <= p.eval_fraction < 1:
            raise ConfigError("pipeline.eval_fraction must lie in [0, 1)")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if len(self.window.ratios) != 3 or min(self.window.ratios) <= 0:
            raise ConfigError("window.ratios needs three positive parts")
        return self

    # -- derived per-stage objects --------------------------------------------
    def synth_config(self):
        return dataclasses.replace(self.synth, seed=self.seed)

    def schema_text(self):
        from .trackers import default_schema
        if self.schema:
            return Path(self.schema).read_text(encoding="utf-8")
        return default_schema().to_text()

    def section_text(self, section):
        flat = dict(self.items())
        if section == "schema":
            return self.schema_text()
        keys = _SECTION_KEYS.get(section)
        if keys is None:
            keys = [k for k in flat if k.startswith(section + ".")]
        return "".join(f"{k}={_format(flat[k])}\n" for k in keys)

    def stage_hash(self, stage, upstream: dict):
        """Hash of a stage's own settings, the global seed and its inputs' hashes."""
        sections, ups = STAGE_INPUTS[stage]
        h = hashlib.sha256(f"stage={stage}\nseed={self.seed}\n".encode())
        for s in sections:
            h.update(f"[{s}]\n{self.section_text(s)}".encode())
        for u in ups:
            h.update(f"<{u}>{upstream[u]}\n".encode())
        return h.hexdigest()[:16]


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text, current, key):
    text = text.strip()
    try:
        if isinstance(current, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return text.lower() in ("true", "1", "yes")
        if isinstance(current, tuple):
            kind = type(current[0]) if current else float
            return tuple(kind(x) for x in text.split(",") if x.strip())
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if current is None:
            return int(text) if text else None
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


def apply(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Return ``cfg`` with dotted-key overrides applied."""
    top = {}
    nested = {}
    flat = dict(cfg.items())
    for key, raw in overrides.items():
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r}")
        value = raw if not isinstance(raw, str) else _parse_value(raw, flat[key], key)
        if "." in key:
            sec, name = key.split(".", 1)
            nested.setdefault(sec, {})[name] = value
        else:
            top[key] = value
    for sec, vals in nested.items():
        top[sec] = dataclasses.replace(getattr(cfg, sec), **vals)
    return dataclasses.replace(cfg, **top)


def parse_text(text, source="<config>"):
    out = {}
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{i}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load(path=None, overrides=None) -> RunConfig:
    """Defaults, then the file, then explicit overrides."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} not found")
        cfg = apply(cfg, parse_text(p.read_text(encoding="utf-8"), str(path)))
    if overrides:
        cfg = apply(cfg, overrides)
    return cfg.validate()
