"""Hand-controller serial frames and an emulated five-finger hand.

Frame: ``0x7E | 5 state bytes (0x01 flex, 0x00 extend) | XOR of the six preceding bytes``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

SYNC = 0x7E
FRAME_LEN = 7
FULL_TRAVEL_S = 0.8
SLEW_LIMIT = 1.0 / FULL_TRAVEL_S


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class MotorCommand:
    finger: int
    target: str  # "flex" | "extend"
    duty: int = 255

    def __post_init__(self):
        if not 0 <= self.finger <= 4:
            raise ValueError("finger index must be 0-4")
        if self.target not in ("flex", "extend"):
            raise ValueError("target must be 'flex' or 'extend'")
        if not 0 <= self.duty <= 255:
            raise ValueError("duty must be 0-255")


def checksum(data: bytes) -> int:
    c = 0
    for b in data:
        c ^= b
    return c


def encode_states(states) -> bytes:
    body = bytes([SYNC] + [1 if s else 0 for s in states])
    if len(body) != 6:
        raise ValueError("need exactly 5 finger states")
    return body + bytes([checksum(body)])


def encode_command(pred) -> bytes:
    return encode_states(pred.states)


def decode_frame(frame: bytes) -> tuple:
    if len(frame) != FRAME_LEN or frame[0] != SYNC:
        raise FrameError("bad length or sync byte")
    if checksum(frame[:6]) != frame[6]:
        raise FrameError("checksum mismatch")
    if any(b > 1 for b in frame[1:6]):
        raise FrameError("state byte out of range")
    return tuple(bool(b) for b in frame[1:6])


def commands_from_states(states) -> list[MotorCommand]:
    return [MotorCommand(f, "flex" if s else "extend") for f, s in enumerate(states)]


class FrameParser:
    """Splits a serial byte stream into frames; bad frames are dropped whole."""

    def __init__(self):
        self._buf = bytearray()
        self.errors = 0

    def feed(self, data: bytes) -> list[tuple]:
        self._buf += data
        out = []
        while True:
            i = self._buf.find(bytes([SYNC]))
            if i < 0:
                if self._buf:
                    self.errors += 1
                self._buf.clear()
                break
            if i:
                self.errors += 1
                del self._buf[:i]
            if len(self._buf) < FRAME_LEN:
                break
            try:
                out.append(decode_frame(bytes(self._buf[:FRAME_LEN])))
                del self._buf[:FRAME_LEN]
            except FrameError:
                self.errors += 1
                del self._buf[:1]
        return out


@dataclass(frozen=True, eq=False)
class HandState:
    positions: np.ndarray = field(default_factory=lambda: np.zeros(5))
    targets: np.ndarray = field(default_factory=lambda: np.zeros(5))
    errors: int = 0

    def __post_init__(self):
        object.__setattr__(self, "positions", np.clip(np.asarray(self.positions, dtype=float), 0.0, 1.0))
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=float))


def step_hand(state: HandState, frame: bytes | None, dt_s: float,
              slew_limit: float = SLEW_LIMIT) -> HandState:
    """Apply one frame (or ``None``) and integrate for ``dt_s`` seconds.

    A malformed frame keeps the previous targets and bumps the error count.
    """
    if dt_s <= 0:
        raise ValueError("dt_s must be positive")
    targets, errors = state.targets, state.errors
    if frame is not None:
        try:
            targets = np.array(decode_frame(frame), dtype=float)
        except FrameError:
            errors += 1
    max_step = slew_limit * dt_s
    delta = targets - state.positions
    # the tolerance absorbs rounding in accumulated steps so the target is hit exactly
    move = np.where(np.abs(delta) <= max_step + 1e-12, delta, np.sign(delta) * max_step)
    return HandState(state.positions + move, targets, errors)


class EmulatedHand:
    """Hand driven by serial bytes; ``advance`` integrates motion over time."""

    def __init__(self, slew_limit: float = SLEW_LIMIT):
        self.state = HandState()
        self.parser = FrameParser()
        self.slew_limit = slew_limit
        self.t_s = 0.0
        self.trajectory: list[tuple] = []

    def feed(self, data: bytes):
        frames = self.parser.feed(data)
        if frames:
            self.state = replace(self.state, targets=np.array(frames[-1], dtype=float))
        self.state = replace(self.state, errors=self.parser.errors)

    def advance(self, dt_s: float):
        if dt_s <= 0:
            return
        self.state = step_hand(self.state, None, dt_s, self.slew_limit)
        self.t_s += dt_s
        self.trajectory.append((self.t_s, *self.state.positions.tolist()))

    def advance_to(self, t_s: float):
        self.advance(t_s - self.t_s)

    def write_trajectory(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "pos1", "pos2", "pos3", "pos4", "pos5"])
            for row in self.trajectory:
                w.writerow([f"{row[0]:.6f}"] + [f"{v:.6f}" for v in row[1:]])
