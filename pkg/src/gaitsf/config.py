"""Run configuration: ``key = value`` text files with ``#`` comments.

Every key has a typed default; unknown keys and bad values are rejected at
parse time with the offending line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .evaluation import Protocol
from .pipeline import TrainConfig
from .silhouette import CONDITIONS, SynthSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    seed: int = 0
    n_subjects: int = 40
    n_pretrain_subjects: int = 20
    conditions: tuple = ("NM", "CL")
    pretrain_conditions: tuple = ("NM",)
    views: tuple = (0, 45, 90, 135, 180)
    seqs_per_cell: int = 2
    n_frames: int = 30
    # encoder
    n_parts: int = 4
    dim: int = 16
    # supervised pre-training
    pretrain_epochs: int = 40
    pretrain_lr: float = 0.03
    pretrain_batch: int = 64
    pretrain_weight_decay: float = 5e-4
    logit_scale: float = 16.0
    view_epochs: int = 20
    view_lr: float = 0.1
    view_flags: str = "classifier"  # classifier | oracle
    # unsupervised stages
    baseline_epochs: int = 50
    baseline_iters: int = 50
    baseline_s_up: float = 0.7
    sf_epochs: int = 50
    sf_iters: int = 100
    sf_s_up: float = 0.3
    batch_clusters: int = 8
    batch_seqs: int = 16
    lr: float = 1e-4
    weight_decay: float = 5e-4
    milestones: tuple = (3500, 8500)
    train_frames: int = 30
    n_neighbors: int = 40
    mutual_knn: bool = False
    infomap_trials: int = 1
    tau: float = 0.05
    momentum: float = 0.2
    momentum_mode: str = "fixed"  # fixed | cosine
    m_max: float = 0.5
    m_min: float = 0.1
    a: int = 2
    c_low: float = 0.8
    s_o: float = 0.7
    lambda_base: float = 0.005
    s_min: float = 0.0
    p_identity: float = 0.0
    checkpoint_every: int = 10
    # evaluation
    gallery_condition: str = "NM"
    gallery_seqs: tuple = (1, 2, 3, 4)
    probe_conditions: tuple = ("NM", "BG", "CL")
    ranks: tuple = (1, 5)
    exclude_same_view: bool = True
    eval_split: str = "train"

    def validate(self):
        for f in fields(self):
            check = _CHECKS.get(f.name)
            if check is not None:
                msg = check(getattr(self, f.name))
                if msg:
                    raise ConfigError(f"{f.name}: {msg}")
        if self.m_min > self.m_max:
            raise ConfigError("m_min: must not exceed m_max")
        return self

    # builders -------------------------------------------------------------

    def synth_spec(self, split: str) -> SynthSpec:
        if split == "pretrain":
            return SynthSpec(n_subjects=self.n_pretrain_subjects,
                             conditions=self.pretrain_conditions, views=self.views,
                             seqs_per_cell=self.seqs_per_cell, n_frames=self.n_frames,
                             seed=self.seed + 1000, first_subject_id=self.n_subjects + 101)
        return SynthSpec(n_subjects=self.n_subjects, conditions=self.conditions,
                         views=self.views, seqs_per_cell=self.seqs_per_cell,
                         n_frames=self.n_frames, seed=self.seed, first_subject_id=1)

    def train_config(self, stage: str) -> TrainConfig:
        if stage not in ("baseline", "sf"):
            raise ConfigError(f"no training config for stage {stage!r}")
        shared = dict(batch_clusters=self.batch_clusters, batch_seqs=self.batch_seqs,
                      lr=self.lr, weight_decay=self.weight_decay,
                      milestones=tuple(self.milestones), n_frames=self.train_frames,
                      n_neighbors=self.n_neighbors, mutual_knn=self.mutual_knn,
                      infomap_trials=self.infomap_trials, tau=self.tau,
                      momentum=self.momentum, momentum_mode=self.momentum_mode,
                      m_max=self.m_max, m_min=self.m_min, a=self.a, c_low=self.c_low,
                      s_o=self.s_o, lambda_base=self.lambda_base, s_min=self.s_min,
                      p_identity=self.p_identity)
        if stage == "baseline":
            return TrainConfig(epochs=self.baseline_epochs, iters=self.baseline_iters,
                               s_up=self.baseline_s_up, seed=self.seed + 1, **shared)
        return TrainConfig(epochs=self.sf_epochs, iters=self.sf_iters, s_up=self.sf_s_up,
                           seed=self.seed + 2, **shared)

    def protocol(self) -> Protocol:
        return Protocol(self.gallery_condition, tuple(self.gallery_seqs),
                        tuple(self.probe_conditions))


def _pos(v):
    return None if v >= 1 else "must be >= 1"


def _nonneg(v):
    return None if v >= 0 else "must be >= 0"


def _unit(v):
    return None if 0 <= v <= 1 else "must lie in [0, 1]"


def _sim(v):
    return None if -1 <= v <= 1 else "must lie in [-1, 1]"


def _gt0(v):
    return None if v > 0 else "must be > 0"


def _one_of(*opts):
    return lambda v: None if v in opts else f"must be one of {', '.join(opts)}"


def _conds(v):
    if not v:
        return "must be nonempty"
    bad = [c for c in v if c not in CONDITIONS]
    return f"unknown condition(s) {bad}" if bad else None


def _views(v):
    if not v:
        return "must be nonempty"
    return None if all(0 <= x <= 180 for x in v) else "views must lie in [0, 180]"


def _all_pos(v):
    return None if v and all(x >= 1 for x in v) else "must be a nonempty list of ints >= 1"


_CHECKS = {
    "n_subjects": _pos, "n_pretrain_subjects": _pos, "seqs_per_cell": _pos, "n_frames": _pos,
    "conditions": _conds, "pretrain_conditions": _conds, "views": _views,
    "n_parts": _pos, "dim": _pos, "pretrain_epochs": _nonneg, "pretrain_lr": _nonneg,
    "pretrain_batch": _pos, "pretrain_weight_decay": _nonneg, "logit_scale": _gt0,
    "view_epochs": _nonneg, "view_lr": _nonneg,
    "view_flags": _one_of("classifier", "oracle"),
    "baseline_epochs": _nonneg, "baseline_iters": _nonneg, "baseline_s_up": _sim,
    "sf_epochs": _nonneg, "sf_iters": _nonneg, "sf_s_up": _sim,
    "batch_clusters": _pos, "batch_seqs": _pos, "lr": _nonneg, "weight_decay": _nonneg,
    "milestones": lambda v: None if all(x >= 0 for x in v) else "must be >= 0",
    "train_frames": _pos, "n_neighbors": _pos, "infomap_trials": _pos, "tau": _gt0,
    "momentum": _unit, "momentum_mode": _one_of("fixed", "cosine"), "m_max": _unit,
    "m_min": _unit, "a": _pos, "c_low": _unit, "s_o": _sim, "lambda_base": _nonneg,
    "s_min": _sim, "p_identity": _unit, "checkpoint_every": _nonneg,
    "gallery_condition": lambda v: None if v in CONDITIONS else f"unknown condition {v!r}",
    "gallery_seqs": _all_pos, "probe_conditions": _conds, "ranks": _all_pos,
    "eval_split": _one_of("train", "pretrain"),
}

_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}
_ITEM_TYPES = {f.name: type(f.default[0]) for f in fields(RunConfig)
               if isinstance(f.default, tuple)}


def _convert(key, raw: str):
    t = _TYPES[key]
    raw = raw.strip()
    try:
        if t is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if t is tuple:
            it = _ITEM_TYPES[key]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(it(p) for p in parts)
        if t is int:
            return int(raw)
        return t(raw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def apply_overrides(cfg: RunConfig, pairs, where="--set") -> RunConfig:
    """Apply ``(key, raw value, lineno|None)`` triples; returns a new validated config."""
    changes = {}
    for key, raw, lineno in pairs:
        loc = f"line {lineno}" if lineno is not None else where
        if key not in _TYPES:
            raise ConfigError(f"{loc}: unknown key {key!r}")
        try:
            val = _convert(key, raw)
            msg = _CHECKS.get(key, lambda v: None)(val)
        except ConfigError as e:
            raise ConfigError(f"{loc}: {key}: {e}") from None
        if msg:
            raise ConfigError(f"{loc}: {key}: {msg}")
        changes[key] = val
    new = dataclasses.replace(cfg, **changes)
    try:
        return new.validate()
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs, seen = [], {}
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {n}: expected 'key = value', got {line.strip()!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {n}: missing key")
        if key in seen:
            raise ConfigError(f"line {n}: {key}: already set on line {seen[key]}")
        seen[key] = n
        pairs.append((key, raw, n))
    return apply_overrides(base or RunConfig(), pairs, where="config")


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def parse_set(items) -> list:
    out = []
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k.strip(), v, None))
    return out


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def describe_keys() -> str:
    d = RunConfig()
    return "\n".join(f"  {f.name} = {format_value(getattr(d, f.name))}" for f in fields(d))
