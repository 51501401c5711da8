"""Pipeline configuration: one INI-style file with a section per module, plus session entries."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .dynamic_removal import RemovalConfig
from .dynastd import DescriptorConfig
from .loop_closure import LoopConfig
from .pose_graph import PGOConfig
from .registration import GICPConfig, MergeConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    tau: float = 5.0
    d_th: float = 35.0
    standard_leaf: float = 0.1
    k_mme: int = 10
    mme_radius: float = 0.5
    time_tol: float = 0.05
    label_scheme: str = "binary"
    diff_tau: float = 0.5


@dataclass
class SynthConfig:
    frames: int = 600
    n_walkers: int = 3
    offset_x: float = 16.0
    offset_y: float = -8.0
    offset_yaw: float = 90.0  # degrees
    query_fov: float = 216.0
    query_start: float = 42.0
    query_lateral: float = -1.5
    query_t0: float = 30.0


@dataclass
class SessionEntry:
    id: int
    clouds: str
    poses: str
    labels: Optional[str] = None
    ground_truth: Optional[str] = None  # TUM poses in the central frame


@dataclass
class PipelineConfig:
    removal: RemovalConfig = field(default_factory=RemovalConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    pgo: PGOConfig = field(default_factory=PGOConfig)
    gicp: GICPConfig = field(default_factory=GICPConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    sessions: List[SessionEntry] = field(default_factory=list)
    central: Optional[int] = None
    n_a: int = 10
    seed: int = 0
    threads: int = 1
    out_dir: str = "out"
    use_removal: bool = True
    ego_grid: bool = False

    def session(self, sid) -> SessionEntry:
        for s in self.sessions:
            if s.id == sid:
                return s
        raise ConfigError(f"no session {sid}")

    @property
    def central_id(self) -> int:
        if self.central is not None:
            return self.central
        if not self.sessions:
            raise ConfigError("no sessions configured")
        return self.sessions[0].id

    def merge_config(self) -> MergeConfig:
        return dataclasses.replace(self.merge, loop=self.loop, pgo=self.pgo, gicp=self.gicp, threads=self.threads)

    def validate(self):
        if self.n_a < 1:
            raise ConfigError("pipeline.n_a must be >= 1")
        if self.threads < 1:
            raise ConfigError("pipeline.threads must be >= 1")
        for name, v in (
            ("descriptor.leaf", self.descriptor.leaf),
            ("descriptor.side_res", self.descriptor.side_res),
            ("descriptor.dot_res", self.descriptor.dot_res),
            ("merge.r_th", self.merge.r_th),
            ("merge.unified_leaf", self.merge.unified_leaf),
            ("eval.tau", self.eval.tau),
            ("eval.d_th", self.eval.d_th),
            ("pgo.xi", self.pgo.xi),
        ):
            if not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if not 0 <= self.loop.overlap_min <= 1:
            raise ConfigError("loop.overlap_min must lie in [0, 1]")
        ids = [s.id for s in self.sessions]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate session ids {ids}")
        if any(not 0 <= i < 256 for i in ids):
            raise ConfigError("session ids must fit in one byte")
        if self.sessions and self.central_id not in ids:
            raise ConfigError(f"central session {self.central_id} is not configured")
        return self

    def to_dict(self) -> dict:
        """Every setting except the worker count, which never changes results."""
        out = {}
        for name in ("removal", "descriptor", "loop", "pgo", "gicp", "eval", "synth"):
            out[name] = dataclasses.asdict(getattr(self, name))
        m = dataclasses.asdict(self.merge)
        for k in ("loop", "pgo", "gicp", "threads"):
            m.pop(k)
        out["merge"] = m
        out["pipeline"] = {
            "central": self.central_id if self.sessions else self.central,
            "n_a": self.n_a,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "use_removal": self.use_removal,
            "ego_grid": self.ego_grid,
        }
        out["sessions"] = [dataclasses.asdict(s) for s in self.sessions]
        return out


_SECTIONS = ("removal", "descriptor", "loop", "pgo", "gicp", "merge", "eval", "synth")
_PIPELINE_KEYS = {"central": int, "n_a": int, "seed": int, "threads": int, "out_dir": str, "use_removal": bool, "ego_grid": bool}
_MERGE_NESTED = {"loop", "pgo", "gicp", "threads"}


def _cast(raw: str, proto, where):
    try:
        if isinstance(proto, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(proto, int):
            return int(raw)
        if isinstance(proto, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def _apply(obj, items, section):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in items:
        if key not in fields or (section == "merge" and key in _MERGE_NESTED):
            raise ConfigError(f"[{section}] unknown key {key!r}")
        updates[key] = _cast(raw, getattr(obj, key), f"[{section}] {key}")
    try:
        return dataclasses.replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text: str, base_dir=".") -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = PipelineConfig()
    for sec in cp.sections():
        items = list(cp.items(sec))
        if sec in _SECTIONS:
            setattr(cfg, sec, _apply(getattr(cfg, sec), items, sec))
        elif sec == "pipeline":
            for key, raw in items:
                if key not in _PIPELINE_KEYS:
                    raise ConfigError(f"[pipeline] unknown key {key!r}")
                proto = {bool: False, int: 0, str: ""}[_PIPELINE_KEYS[key]]
                setattr(cfg, key, _cast(raw, proto, f"[pipeline] {key}"))
        elif sec.startswith("session."):
            try:
                sid = int(sec.split(".", 1)[1])
            except ValueError as exc:
                raise ConfigError(f"[{sec}] session ids are integers") from exc
            d = dict(items)
            unknown = set(d) - {"clouds", "poses", "labels", "ground_truth"}
            if unknown:
                raise ConfigError(f"[{sec}] unknown keys {sorted(unknown)}")
            for req in ("clouds", "poses"):
                if req not in d:
                    raise ConfigError(f"session {sid}: missing {req}")

            def path(v):
                return v if v is None or os.path.isabs(v) else os.path.normpath(os.path.join(base_dir, v))

            cfg.sessions.append(SessionEntry(sid, path(d["clouds"]), path(d["poses"]), path(d.get("labels")), path(d.get("ground_truth"))))
        else:
            raise ConfigError(f"unknown section [{sec}]")
    cfg.sessions.sort(key=lambda s: s.id)
    return cfg


def load_config(path) -> PipelineConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} not found")
    with open(path) as fh:
        return parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))


def config_text(cfg: PipelineConfig, sessions_relative_to: Optional[str] = None) -> str:
    """INI text that parses back to ``cfg``."""
    d = cfg.to_dict()
    lines = ["[pipeline]"]
    for k, v in d["pipeline"].items():
        if v is not None:
            lines.append(f"{k} = {_ini(v)}")
    lines.append(f"threads = {cfg.threads}")
    for sec in _SECTIONS:
        lines += ["", f"[{sec}]"]
        lines += [f"{k} = {_ini(v)}" for k, v in d[sec].items()]
    for s in cfg.sessions:
        lines += ["", f"[session.{s.id}]"]
        for k in ("clouds", "poses", "labels", "ground_truth"):
            v = getattr(s, k)
            if v is None:
                continue
            if sessions_relative_to is not None:
                v = os.path.relpath(v, sessions_relative_to)
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _ini(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def session_dirs(cfg: PipelineConfig) -> Dict[int, str]:
    return {s.id: os.path.join(cfg.out_dir, f"session_{s.id}") for s in cfg.sessions}
