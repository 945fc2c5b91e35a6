"""Turn detections into spoken-style text under a user-selected delivery policy."""
from __future__ import annotations

import logging
import shlex
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

log = logging.getLogger(__name__)

DIRECTIONS = ("left", "ahead", "right")
MAX_MESSAGE = 120
TOO_CLOSE_MM = 1000.0
ONCE_TIMEOUT_S = 10.0
URGENT_GAP_S = 1.0


@dataclass
class Detection:
    label: str
    score: float
    box: tuple[float, float, float, float]
    grid_cell: tuple[int, int]
    distance_mm: float | None = None
    timestamp: float = 0.0
    image: str = ""

    def to_json(self) -> dict:
        return {
            "image": self.image,
            "class": self.label,
            "score": round(float(self.score), 6),
            "box": [round(float(v), 3) for v in self.box],
            "grid_cell": list(self.grid_cell),
            "distance_mm": "unknown" if self.distance_mm is None else int(round(self.distance_mm)),
        }


@dataclass
class Announcement:
    timestamp: float
    text: str
    urgency: str = "normal"

    def __post_init__(self):
        if not self.text:
            raise ValueError("announcement text must be non-empty")
        if self.urgency not in ("normal", "urgent"):
            raise ValueError(f"unknown urgency {self.urgency!r}")

    def to_json(self) -> dict:
        return {"announcement": self.text, "timestamp": self.timestamp, "urgency": self.urgency}


def direction(grid_cell: tuple[int, int], grid_cols: int = 3) -> str:
    col = grid_cell[1]
    third = min(col * 3 // grid_cols, 2)
    return DIRECTIONS[third]


def format_message(d: Detection, grid_cols: int = 3) -> str:
    where = direction(d.grid_cell, grid_cols)
    if d.distance_mm is None:
        text = f"{d.label} {where}, distance unknown"
    else:
        text = f"{d.label} {where} at {int(round(d.distance_mm))} millimeters"
    return text[:MAX_MESSAGE]


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FixedInterval:
    period: float

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("interval period must be positive")


@dataclass(frozen=True)
class Once:
    timeout: float = ONCE_TIMEOUT_S

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("once timeout must be positive")


@dataclass(frozen=True)
class TooClose:
    threshold: float = TOO_CLOSE_MM

    def __post_init__(self):
        if not self.threshold >= 20:
            raise ValueError("too-close threshold must be at least 20 mm")


Policy = FixedInterval | Once | TooClose


def parse_policy(spec: str) -> Policy:
    """``interval:N`` (seconds), ``once`` or ``tooclose:MM``."""
    name, _, arg = spec.partition(":")
    name = name.strip().lower()
    try:
        if name == "interval":
            return FixedInterval(float(arg))
        if name == "once":
            return Once(float(arg)) if arg else Once()
        if name == "tooclose":
            return TooClose(float(arg)) if arg else TooClose()
    except ValueError as exc:
        raise ValueError(f"bad policy {spec!r}: {exc}") from None
    raise ValueError(f"unknown policy {spec!r}; expected interval:N, once or tooclose:MM")


@dataclass
class Scheduler:
    """Per-class announcement state for one detection stream."""
    policy: Policy
    too_close_mm: float = TOO_CLOSE_MM
    grid_cols: int = 3
    _last_time: float | None = None
    _last_spoken: dict[str, float] = field(default_factory=dict)
    _last_seen: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.policy, TooClose):
            self.too_close_mm = self.policy.threshold

    def _urgency(self, d: Detection) -> str:
        return "urgent" if d.distance_mm is not None and d.distance_mm < self.too_close_mm else "normal"

    def feed(self, d: Detection) -> Announcement | None:
        t = d.timestamp
        if self._last_time is not None and t < self._last_time:
            raise ValueError(f"timestamps must be non-decreasing ({t} after {self._last_time})")
        self._last_time = t
        p = self.policy
        c = d.label
        speak = False
        if isinstance(p, FixedInterval):
            last = self._last_spoken.get(c)
            speak = last is None or t - last >= p.period
        elif isinstance(p, Once):
            seen = self._last_seen.get(c)
            speak = seen is None or t - seen >= p.timeout
            self._last_seen[c] = t
        elif isinstance(p, TooClose):
            last = self._last_spoken.get(c)
            close = d.distance_mm is not None and d.distance_mm < p.threshold
            speak = close and (last is None or t - last >= URGENT_GAP_S)
        if not speak:
            return None
        self._last_spoken[c] = t
        return Announcement(t, format_message(d, self.grid_cols), self._urgency(d))


def schedule(policy: Policy, stream: Iterable[Detection], too_close_mm: float = TOO_CLOSE_MM,
             grid_cols: int = 3) -> list[Announcement]:
    sched = Scheduler(policy, too_close_mm, grid_cols)
    out = []
    for d in stream:
        a = sched.feed(d)
        if a is not None:
            out.append(a)
    return out


# ---------------------------------------------------------------------------
# Sinks
# ---------------------------------------------------------------------------

class StdoutSink:
    def __init__(self, stream: TextIO | None = None):
        self.stream = stream

    def write(self, a: Announcement) -> None:
        print(a.text, file=self.stream or sys.stdout, flush=True)


class FileSink:
    def __init__(self, path: str | Path):
        self.path = Path(path)

    def write(self, a: Announcement) -> None:
        with open(self.path, "a") as fh:
            fh.write(a.text + "\n")


class CommandSink:
    """Runs an external command (e.g. a speech synthesizer) per announcement.

    ``{text}`` in the template is replaced by the message; without it the
    message is appended as the last argument.
    """

    def __init__(self, template: str, timeout: float = 30.0):
        self.template = template
        self.timeout = timeout

    def argv(self, text: str) -> list[str]:
        parts = shlex.split(self.template)
        if any("{text}" in p for p in parts):
            return [p.replace("{text}", text) for p in parts]
        return parts + [text]

    def write(self, a: Announcement) -> None:
        proc = subprocess.run(self.argv(a.text), capture_output=True, text=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise RuntimeError(f"speech command exited with status {proc.returncode}")


def emit(a: Announcement, sinks: Sequence) -> bool:
    """Deliver to every sink; failures are logged and reported, never raised."""
    ok = True
    for sink in sinks:
        try:
            sink.write(a)
        except Exception as exc:  # noqa: BLE001 - a broken sink must not stop the pipeline
            log.warning("announcement sink %s failed: %s", type(sink).__name__, exc)
            ok = False
    return ok
