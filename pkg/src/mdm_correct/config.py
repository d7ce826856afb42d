"""Experiment configuration: a sectioned YAML file of flat key/value pairs.

Example::

    target:
      kind: all_equal      # all_equal | parity | product_uniform | markov_chain | table
      D: 2
      V: 2
    schedule:
      kind: linear         # linear | cosine
    sampler:
      strategy: vanilla
      T: 1
    seeds:
      master: 7
      replicas: 10000
    outputs:
      dir: out

Unknown sections or keys are rejected with the offending line number.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .samplers import SamplerConfig
from .schedules import NoiseSchedule, RemaskSchedule
from .targets import DataDistribution, build_distribution


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = f"{source or '<config>'}:{line}: " if line else f"{source or '<config>'}: "
        super().__init__(where + message)


TARGET_KEYS = {"kind", "D", "V", "transition", "stay", "path"}
SCHEDULE_KEYS = {"kind"}
SAMPLER_KEYS = ({f.name for f in fields(SamplerConfig)} - {"remask_schedule"}) | {
    "remask_kind", "remask_eta", "remask_tail_off"}
SEED_KEYS = {"master", "replicas", "block_size"}
OUTPUT_KEYS = {"dir", "formats"}
SWEEP_KEYS = {"T", "strategy", "score_type", "rule", "criterion", "variants"}
DIAGNOSE_KEYS = {"steps", "n_samples", "flip_count", "n_states", "times"}

SECTIONS = {
    "target": TARGET_KEYS,
    "schedule": SCHEDULE_KEYS,
    "sampler": SAMPLER_KEYS,
    "seeds": SEED_KEYS,
    "outputs": OUTPUT_KEYS,
    "sweep": SWEEP_KEYS,
    "diagnose": DIAGNOSE_KEYS,
}
REQUIRED = ("target", "sampler")


@dataclass(frozen=True)
class Seeds:
    master: int = 0
    replicas: int = 1000
    block_size: int = 1000

    def __post_init__(self):
        if self.replicas < 1 or self.block_size < 1:
            raise ValueError("replicas and block_size must be >= 1")


@dataclass(frozen=True)
class Outputs:
    dir: str | None = None
    formats: tuple[str, ...] = ("csv", "json")


@dataclass(frozen=True)
class ExperimentConfig:
    target: dict
    sampler: SamplerConfig
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    seeds: Seeds = field(default_factory=Seeds)
    outputs: Outputs = field(default_factory=Outputs)
    sweep: dict | None = None
    diagnose: dict | None = None

    def build_target(self) -> DataDistribution:
        params = dict(self.target)
        return build_distribution(params.pop("kind"), **params)

    def to_dict(self) -> dict:
        s = self.sampler.to_dict()
        rs = s.pop("remask_schedule")
        s.update(remask_kind=rs["kind"], remask_eta=rs["eta"], remask_tail_off=rs["tail_off"])
        out: dict[str, Any] = {
            "target": dict(self.target),
            "schedule": {"kind": self.schedule.kind.value},
            "sampler": s,
            "seeds": {"master": self.seeds.master, "replicas": self.seeds.replicas,
                      "block_size": self.seeds.block_size},
            "outputs": {"dir": self.outputs.dir, "formats": list(self.outputs.formats)},
        }
        if self.sweep is not None:
            out["sweep"] = self.sweep
        if self.diagnose is not None:
            out["diagnose"] = self.diagnose
        return out

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def digest(self) -> str:
        return hashlib.sha256(yaml.safe_dump(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _key_lines(text: str, source: str | None) -> dict[tuple[str, ...], int]:
    """Line number (1-based) of every section and section key."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from None
    lines: dict[tuple[str, ...], int] = {}
    if root is None:
        return lines
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError("top level must be a mapping of sections", root.start_mark.line + 1, source)
    for knode, vnode in root.value:
        lines[(knode.value,)] = knode.start_mark.line + 1
        if isinstance(vnode, yaml.MappingNode):
            for k2, _ in vnode.value:
                lines[(knode.value, k2.value)] = k2.start_mark.line + 1
    return lines


def loads(text: str, source: str | None = None) -> ExperimentConfig:
    lines = _key_lines(text, source)
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping of sections", 1, source)

    for section, body in data.items():
        line = lines.get((section,))
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r}", line, source)
        if body is None:
            data[section] = body = {}
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping", line, source)
        for key in body:
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section {section!r}",
                                  lines.get((section, key), line), source)
    for section in REQUIRED:
        if section not in data:
            raise ConfigError(f"missing required section {section!r}", None, source)

    def build(section, fn):
        try:
            return fn(dict(data.get(section) or {}))
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid {section!r} section: {exc}", lines.get((section,)), source) from None

    def make_sampler(d):
        rs = RemaskSchedule(d.pop("remask_kind", "constant"), float(d.pop("remask_eta", 0.0)),
                            int(d.pop("remask_tail_off", 0)))
        return SamplerConfig(remask_schedule=rs, **d)

    def make_outputs(d):
        return Outputs(d.get("dir"), tuple(d.get("formats", ("csv", "json"))))

    def make_target(d):
        if "kind" not in d:
            raise KeyError("target needs a 'kind'")
        params = dict(d)
        build_distribution(params.pop("kind"), **params)
        return d

    cfg = ExperimentConfig(
        target=build("target", make_target),
        sampler=build("sampler", make_sampler),
        schedule=build("schedule", lambda d: NoiseSchedule(d.get("kind", "linear"))),
        seeds=build("seeds", lambda d: Seeds(**d)),
        outputs=build("outputs", make_outputs),
        sweep=data.get("sweep"),
        diagnose=data.get("diagnose"),
    )
    if cfg.sweep is not None:
        build("sweep", lambda d: expand_sweep(cfg))
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    return loads(text, str(path))


def expand_sweep(cfg: ExperimentConfig) -> list[tuple[str, SamplerConfig]]:
    """Named sampler configs for a sweep, in a fixed order.

    With ``variants`` each named override set is crossed with ``T``;
    otherwise the listed axes are expanded as a Cartesian product in the
    order strategy, score_type, rule, criterion, T.
    """
    sweep = cfg.sweep or {}
    base = cfg.sampler.to_dict()
    T_list = sweep.get("T", [cfg.sampler.T])
    runs = []
    if sweep.get("variants"):
        for var in sweep["variants"]:
            var = dict(var)
            name = var.pop("name")
            for T in T_list:
                over = _sampler_overrides(var)
                d = {**base, **over, "T": T}
                if "remask_schedule" in over:
                    d["remask_schedule"] = {**base["remask_schedule"], **over["remask_schedule"]}
                runs.append((name, SamplerConfig.from_dict(d)))
        return runs
    axes = ["strategy", "score_type", "rule", "criterion"]
    values = [sweep.get(a, [base[a]]) for a in axes]
    for combo in itertools.product(*values):
        for T in T_list:
            over = dict(zip(axes, combo))
            name = "/".join(str(v) for v in combo)
            runs.append((name, SamplerConfig.from_dict({**base, **over, "T": T})))
    return runs


def _sampler_overrides(var: dict) -> dict:
    out = dict(var)
    rs = {}
    for k, target in (("remask_kind", "kind"), ("remask_eta", "eta"), ("remask_tail_off", "tail_off")):
        if k in out:
            rs[target] = out.pop(k)
    if rs:
        out["remask_schedule"] = rs
    return out
