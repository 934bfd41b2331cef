"""Discrete half of the hybrid model: PWM carriers, switch words, mode schedules.

Gate convention: a channel is ON (bit 1) while its reference lies above the
sawtooth carrier. The carrier restarts from ``-A_c`` at every period boundary,
which turns the gate on; the carrier/reference crossing turns it off. With a
reference ``r`` held constant over a cycle the duty ratio is therefore
``(r + A_c) / (2 A_c)``.

Modes are 0-based integers. Schedules only record instants at which the mode
actually changes, so dwell times are always strictly positive.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from .errors import DegenerateSchedule, MapIncomplete, RefOutOfRange

# Relative (to the carrier period) tolerance under which two instants are
# treated as the same event.
EVENT_RTOL = 1e-9

Word = tuple[int, ...]


@dataclass(frozen=True)
class PwmSpec:
    """One PWM channel.

    ``reference`` is held constant over each carrier cycle (zero-order hold).
    It may be a float, a sequence indexed by cycle number (the last entry is
    held once the sequence runs out) or a callable evaluated at the cycle
    start time.
    """

    amplitude: float
    period: float
    phase_offset: float = 0.0
    reference: float | Sequence[float] | Callable[[float], float] = 0.0

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("carrier period must be positive")
        if not self.amplitude > 0:
            raise ValueError("carrier amplitude must be positive")
        if not 0.0 <= self.phase_offset < self.period:
            raise ValueError("phase offset must lie in [0, period)")
        if isinstance(self.reference, list):
            object.__setattr__(self, "reference", tuple(self.reference))

    @classmethod
    def from_duty(cls, duty, period, amplitude=1.0, phase_offset=0.0):
        """Channel with a constant duty ratio in [0, 1]."""
        if not 0.0 <= duty <= 1.0:
            raise ValueError("duty must lie in [0, 1]")
        return cls(amplitude, period, phase_offset, amplitude * (2.0 * duty - 1.0))

    @property
    def tol(self) -> float:
        return EVENT_RTOL * self.period

    def cycle(self, t: float) -> tuple[int, float]:
        """Index and start time of the carrier cycle containing ``t``.

        An instant within tolerance of a cycle end is attributed to the next
        cycle.
        """
        k = math.floor((t - self.phase_offset) / self.period)
        start = self.phase_offset + k * self.period
        if t - start >= self.period - self.tol:
            k += 1
            start = self.phase_offset + k * self.period
        elif t < start - self.tol:
            k -= 1
            start = self.phase_offset + k * self.period
        return k, start

    def reference_at(self, k: int, start: float) -> float:
        ref = self.reference
        if callable(ref):
            r = float(ref(start))
        elif isinstance(ref, (tuple, list)):
            r = float(ref[min(max(k, 0), len(ref) - 1)])
        else:
            r = float(ref)
        if abs(r) > self.amplitude:
            raise RefOutOfRange(
                f"reference {r!r} outside carrier range +/-{self.amplitude!r} at t={start!r}")
        return r

    def duty(self, k: int, start: float) -> float:
        r = self.reference_at(k, start)
        return (r + self.amplitude) / (2.0 * self.amplitude)


def carrier_value(t: float, spec: PwmSpec) -> float:
    """Sawtooth carrier, rising from ``-A_c`` to ``A_c`` once per period."""
    phase = ((t - spec.phase_offset) / spec.period) % 1.0
    return 2.0 * spec.amplitude * phase - spec.amplitude


def next_crossing(t_now: float, spec: PwmSpec) -> float:
    """Earliest carrier/reference crossing strictly after ``t_now``.

    The carrier reset at each period boundary counts as a crossing.
    """
    if not math.isfinite(t_now):
        raise ValueError("t_now must be finite")
    k, start = spec.cycle(t_now)
    end = start + spec.period
    r = spec.reference_at(k, start)
    cross = start + spec.period * (r + spec.amplitude) / (2.0 * spec.amplitude)
    if cross > t_now + spec.tol and cross < end - spec.tol:
        return cross
    return end


def gate_value(t: float, spec: PwmSpec) -> int:
    """Gate bit immediately after ``t`` (right limit)."""
    k, start = spec.cycle(t)
    on_time = spec.duty(k, start) * spec.period
    return int(t - start < on_time - spec.tol)


def gate_word(t: float, specs: Sequence[PwmSpec]) -> Word:
    return tuple(gate_value(t, s) for s in specs)


class TransitionMap:
    """Deterministic table ``(mode, switch word) -> next mode``."""

    def __init__(self, table: Mapping[tuple[int, Word], int]):
        self.table = {(int(z), tuple(int(b) for b in w)): int(n)
                      for (z, w), n in table.items()}
        modes = {z for z, _ in self.table} | set(self.table.values())
        self.n_modes = max(modes) + 1 if modes else 0

    @classmethod
    def memoryless(cls, word_to_mode: Mapping[Word, int], n_modes: int | None = None):
        """Map in which the next mode depends on the switch word only."""
        if n_modes is None:
            n_modes = max(word_to_mode.values()) + 1
        return cls({(z, tuple(w)): m for z in range(n_modes)
                    for w, m in word_to_mode.items()})

    def __call__(self, z: int, word: Word) -> int:
        try:
            return self.table[(z, tuple(word))]
        except KeyError:
            raise MapIncomplete(f"no transition for mode {z} under switch word {tuple(word)}")

    def words(self) -> list[Word]:
        return sorted({w for _, w in self.table})

    def word_of_mode(self) -> dict[int, Word]:
        """Inverse of a memoryless map (first word reaching each mode)."""
        inv = {}
        for (_, w), n in sorted(self.table.items()):
            inv.setdefault(n, w)
        return inv

    def __eq__(self, other):
        return isinstance(other, TransitionMap) and self.table == other.table

    def __repr__(self):
        return f"TransitionMap({self.table!r})"


@dataclass(frozen=True)
class EventRecord:
    time: float
    mode: int
    word: Word | None = None


@dataclass
class ModeSchedule:
    records: list[EventRecord]
    horizon_end: float
    # not part of equality: purely informational
    n_candidates: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.records:
            raise ValueError("a schedule needs at least one record")
        times = [r.time for r in self.records]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("event times must strictly increase")
        if times[-1] > self.horizon_end:
            raise ValueError("last event lies beyond the horizon")

    @property
    def t0(self) -> float:
        return self.records[0].time

    @property
    def times(self) -> list[float]:
        return [r.time for r in self.records]

    @property
    def modes(self) -> list[int]:
        return [r.mode for r in self.records]

    def intervals(self) -> list[tuple[float, float, int]]:
        """Dwell intervals ``(t_k, t_{k+1}, z_k)``; the last one ends at the horizon."""
        ends = self.times[1:] + [self.horizon_end]
        return [(r.time, e, r.mode) for r, e in zip(self.records, ends) if e > r.time]

    def mode_at(self, t: float) -> int:
        z = self.records[0].mode
        for r in self.records:
            if r.time <= t:
                z = r.mode
            else:
                break
        return z

    def dwell_times(self) -> list[float]:
        return [b - a for a, b, _ in self.intervals()]


def _min_tol(specs: Sequence[PwmSpec]) -> float:
    return min(s.tol for s in specs)


def next_event(t_k: float, z_k: int, specs: Sequence[PwmSpec],
               tmap: TransitionMap) -> EventRecord:
    """Earliest switching event after ``t_k`` over all channels.

    Channels crossing within tolerance of the earliest one are folded into
    the same event (their bits flip together).
    """
    if not specs:
        raise ValueError("at least one PWM channel is required")
    t_next = min(next_crossing(t_k, s) for s in specs)
    word = gate_word(t_next, specs)
    return EventRecord(t_next, tmap(z_k, word), word)


def build_schedule(t0: float, t_end: float, z0: int, specs: Sequence[PwmSpec],
                   tmap: TransitionMap) -> ModeSchedule:
    """Predict the mode schedule over ``[t0, t_end)`` from the PWM channels."""
    if not t_end > t0:
        raise ValueError("t_end must exceed t0")
    records = [EventRecord(float(t0), int(z0), gate_word(t0, specs))]
    t, z = float(t0), int(z0)
    tol = _min_tol(specs)
    stalls = 0
    n = 0
    while True:
        ev = next_event(t, z, specs, tmap)
        n += 1
        if ev.time >= t_end - tol:
            break
        if not ev.time > t:
            stalls += 1
            if stalls >= 3:
                raise DegenerateSchedule(f"event time stuck at t={t!r}")
            continue
        stalls = 0
        if ev.mode != z:
            records.append(ev)
        t, z = ev.time, ev.mode
    return ModeSchedule(records, float(t_end), n_candidates=n)


def gate_log(t0: float, t_end: float, specs: Sequence[PwmSpec]) -> list[tuple[float, Word]]:
    """Switch words at ``t0`` and at every instant where the word changes."""
    log = [(float(t0), gate_word(t0, specs))]
    t = float(t0)
    tol = _min_tol(specs)
    while True:
        t_next = min(next_crossing(t, s) for s in specs)
        if t_next >= t_end - tol:
            break
        if not t_next > t:
            raise DegenerateSchedule(f"event time stuck at t={t!r}")
        w = gate_word(t_next, specs)
        if w != log[-1][1]:
            log.append((t_next, w))
        t = t_next
    return log


def encode_modes(log: Iterable[tuple[float, Sequence[int]]], tmap: TransitionMap, z0: int,
                 t0: float | None = None, horizon_end: float | None = None) -> ModeSchedule:
    """Replay a recorded gate log through the transition map.

    Entries sharing a timestamp collapse to the last word logged at that
    time; entries at ``t0`` update the initial mode instead of adding an event.
    """
    entries: list[tuple[float, Word]] = []
    prev = None
    for t, w in log:
        t = float(t)
        w = tuple(int(b) for b in w)
        if prev is not None and t < prev:
            raise ValueError("gate log timestamps must be non-decreasing")
        if entries and entries[-1][0] == t:
            entries[-1] = (t, w)
        else:
            entries.append((t, w))
        prev = t
    if t0 is None:
        t0 = entries[0][0] if entries else 0.0
    records = [EventRecord(float(t0), int(z0), None)]
    z = int(z0)
    for t, w in entries:
        if t < t0:
            continue
        nz = tmap(z, w)
        if t == t0:
            records[0] = EventRecord(float(t0), nz, w)
        elif nz != z:
            records.append(EventRecord(t, nz, w))
        z = nz
    if horizon_end is None:
        horizon_end = records[-1].time
    return ModeSchedule(records, float(horizon_end))


# Built-in transition maps. Mode 0 is "switch ON" for the single-switch
# converters; the DAB modes enumerate (primary, secondary) bridge polarity
# as (+,+), (+,-), (-,+), (-,-).
def single_switch_map() -> TransitionMap:
    return TransitionMap.memoryless({(1,): 0, (0,): 1}, 2)


def dab_map() -> TransitionMap:
    return TransitionMap.memoryless({(1, 1): 0, (1, 0): 1, (0, 1): 2, (0, 0): 3}, 4)
