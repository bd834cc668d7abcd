"""Flat `key = value` run configuration with lossless text round-trips.

Files hold one `key = value` pair per line; `#` starts a comment, blank
lines are ignored. Unknown keys and malformed lines are errors. Floats are
serialized with repr() so parse(serialize(cfg)) reproduces every bit.
The HMBA_SEED environment variable, when set, overrides the seed.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

__all__ = ["RunConfig", "parse_config", "load_run_config"]

_ADAPTERS = ("da", "ic", "qmamba")
_MODES = ("current_frame", "pooled_frames")
_SCANS = ("seq", "parallel")
_SCHEDULES = ("constant", "cosine")


@dataclass
class RunConfig:
    # model geometry
    frames: int = 5
    channels: int = 16
    d_model: int = 32
    d_state: int = 8
    d_conv: int = 4
    expand: int = 2
    dt_rank: int = 2
    t_max: int = 16
    granularities: tuple[str, ...] = ("t", "dst", "jst")
    branches: tuple[str, ...] = ("high", "low")
    low_stride: int = 2
    scan: str = "parallel"
    adapter: str = "qmamba"
    kv_scope: str = "channel"
    mode: str = "current_frame"
    # synthetic task
    moving: bool = True
    distractors: int = 7
    target_amp: float = 1.0
    distractor_amp: float = 0.95
    noise: float = 0.4
    velocities: tuple[int, ...] = (1, 2)
    # training
    train_size: int = 2000
    test_size: int = 500
    batch: int = 16
    steps: int = 500
    lr: float = 0.01
    lr_schedule: str = "constant"
    eval_every: int = 25
    seed: int = 0

    def validate(self) -> "RunConfig":
        checks = [
            (self.frames >= 1, "frames must be >= 1"),
            (self.channels >= 2, "channels must be >= 2"),
            (self.d_model >= 1, "d_model must be >= 1"),
            (self.d_state >= 1, "d_state must be >= 1"),
            (self.d_conv >= 1, "d_conv must be >= 1"),
            (self.expand >= 1, "expand must be >= 1"),
            (self.dt_rank >= 1, "dt_rank must be >= 1"),
            (self.t_max >= self.frames, "t_max must cover frames"),
            (self.low_stride >= 1, "low_stride must be >= 1"),
            (self.adapter in _ADAPTERS, f"adapter must be one of {_ADAPTERS}"),
            (self.mode in _MODES, f"mode must be one of {_MODES}"),
            (self.scan in _SCANS, f"scan must be one of {_SCANS}"),
            (self.lr_schedule in _SCHEDULES,
             f"lr_schedule must be one of {_SCHEDULES}"),
            (all(g in ("t", "dst", "jst") for g in self.granularities),
             "granularities may only contain t, dst, jst"),
            (all(b in ("high", "low") for b in self.branches),
             "branches may only contain high, low"),
            (0 <= self.distractors < self.channels,
             "distractors must fit the channel grid"),
            (self.batch >= 1 and self.steps >= 0, "batch/steps out of range"),
            (self.eval_every >= 1, "eval_every must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"bad config: {msg}")
        return self

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, f: dataclasses.Field):
    text = text.strip()
    ftype = f.type if isinstance(f.type, str) else f.type.__name__
    if ftype == "bool":
        if text not in ("true", "false"):
            raise ValueError(f"expected true/false for '{f.name}', got '{text}'")
        return text == "true"
    if ftype == "int":
        return int(text)
    if ftype == "float":
        return float(text)
    if ftype.startswith("tuple[str"):
        return tuple(p.strip() for p in text.split(",") if p.strip())
    if ftype.startswith("tuple[int"):
        return tuple(int(p) for p in text.split(",") if p.strip())
    return text


def parse_config(text: str) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    seen: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got '{raw}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"line {lineno}: unknown key '{key}'")
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate key '{key}'")
        seen[key] = _parse_value(value, fields[key])
    return RunConfig(**seen).validate()


def load_run_config(path: str | Path | None,
                    env: dict[str, str] | None = None) -> RunConfig:
    """Read a config file (or defaults when path is None); HMBA_SEED wins."""
    env = os.environ if env is None else env
    cfg = parse_config(Path(path).read_text()) if path else RunConfig()
    if "HMBA_SEED" in env:
        cfg = dataclasses.replace(cfg, seed=int(env["HMBA_SEED"]))
    return cfg.validate()
