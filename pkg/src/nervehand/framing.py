"""Device byte-stream format, real-time device emulation and multi-device alignment.

Wire layout of one block (all multi-byte fields little-endian)::

    magic 0xC5 0x5C | device_id u8 | seq u16 | tick_count u16 | payload | crc u16

The payload holds ``tick_count`` ticks, each tick being 8 signed 16-bit samples
(channel-major within the tick).  The CRC is CRC-16/CCITT-FALSE computed over
everything between the magic and the CRC field.
"""
from __future__ import annotations

import binascii
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

MAGIC = b"\xc5\x5c"
HEADER = struct.Struct("<2sBHH")
CRC = struct.Struct("<H")
HEADER_SIZE = HEADER.size  # 7
OVERHEAD = HEADER_SIZE + CRC.size  # 9
CHANNELS = 8
SAMPLE_RATE_HZ = 10_000
DEFAULT_TICKS = 50
MAX_TICKS = 1000
MAX_PPM = 2000
SAMPLE_NS = 1_000_000_000 // SAMPLE_RATE_HZ


class FormatError(ValueError):
    """Raised when a block cannot be encoded as requested."""


def crc16(data: bytes) -> int:
    """CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF)."""
    return binascii.crc_hqx(data, 0xFFFF)


@dataclass(frozen=True)
class DeviceConfig:
    device_id: int
    channels: int = CHANNELS
    sample_rate_hz: int = SAMPLE_RATE_HZ
    clock_ppm_offset: float = 0.0
    noise_only: bool = False

    def __post_init__(self):
        if self.channels != CHANNELS:
            raise ValueError(f"devices have {CHANNELS} channels, got {self.channels}")
        if self.sample_rate_hz != SAMPLE_RATE_HZ:
            raise ValueError(f"sample rate must be {SAMPLE_RATE_HZ} Hz")
        if abs(self.clock_ppm_offset) > MAX_PPM:
            raise ValueError(f"|clock_ppm_offset| must be <= {MAX_PPM}")
        if not 0 <= self.device_id <= 255:
            raise ValueError("device_id must fit in one byte")


@dataclass(frozen=True, eq=False)
class RawBlock:
    device_id: int
    seq: int
    samples: np.ndarray  # (tick_count, 8) int16
    crc: int = 0
    acq_timestamp_ns: int = 0

    @property
    def tick_count(self) -> int:
        return self.samples.shape[0]

    def __eq__(self, other):
        if not isinstance(other, RawBlock):
            return NotImplemented
        return (
            self.device_id == other.device_id
            and self.seq == other.seq
            and self.crc == other.crc
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


def _as_samples(samples) -> np.ndarray:
    arr = np.asarray(samples)
    if arr.ndim != 2 or arr.shape[1] != CHANNELS:
        raise FormatError(f"samples must have shape (tick_count, {CHANNELS}), got {arr.shape}")
    if not 1 <= arr.shape[0] <= MAX_TICKS:
        raise FormatError(f"tick_count must be in [1, {MAX_TICKS}], got {arr.shape[0]}")
    if arr.dtype != np.int16:
        if np.issubdtype(arr.dtype, np.floating) and not np.all(arr == np.round(arr)):
            raise FormatError("samples must be integers")
        if arr.min() < -32768 or arr.max() > 32767:
            raise FormatError("sample outside the signed 16-bit range")
        arr = arr.astype(np.int16)
    return arr


def encode_block(device: DeviceConfig | int, seq: int, samples) -> bytes:
    device_id = device.device_id if isinstance(device, DeviceConfig) else int(device)
    arr = _as_samples(samples)
    body = HEADER.pack(MAGIC, device_id, seq & 0xFFFF, arr.shape[0])[2:]
    body += arr.astype("<i2", copy=False).tobytes()
    return MAGIC + body + CRC.pack(crc16(body))


def block_size(tick_count: int) -> int:
    return OVERHEAD + tick_count * CHANNELS * 2


@dataclass(frozen=True)
class Resync:
    """Bytes skipped by the decoder while searching for the next valid block."""

    offset: int
    skipped: int
    reason: str


class StreamDecoder:
    """Incremental block parser.

    ``feed`` accepts arbitrary byte fragments and returns the intact blocks and
    resync events found so far.  A block whose CRC fails but whose claimed end
    is followed by another magic is skipped as one discrete corrupted block;
    otherwise the decoder scans byte-by-byte for the next magic.
    """

    def __init__(self):
        self._buf = bytearray()
        self._consumed = 0  # absolute offset of _buf[0]
        self._skip_start: int | None = None
        self._skip_reason = ""
        self.blocks_ok = 0
        self.resyncs = 0
        self.bytes_skipped = 0

    def _start_skip(self, pos: int, reason: str):
        if self._skip_start is None:
            self._skip_start = self._consumed + pos
            self._skip_reason = reason

    def _end_skip(self, pos: int, events: list):
        if self._skip_start is not None:
            n = self._consumed + pos - self._skip_start
            events.append(Resync(self._skip_start, n, self._skip_reason))
            self.resyncs += 1
            self.bytes_skipped += n
            self._skip_start = None

    def feed(self, data: bytes) -> list:
        self._buf += data
        return self._parse(final=False)

    def _parse(self, final: bool) -> list:
        events: list = []
        buf = self._buf
        pos = 0
        while True:
            idx = buf.find(MAGIC, pos)
            if idx < 0:
                # keep a trailing 0xC5 that could start a magic
                keep = 1 if len(buf) > pos and buf[-1] == MAGIC[0] and not final else 0
                if len(buf) - keep > pos:
                    self._start_skip(pos, "no magic")
                pos = len(buf) - keep
                break
            if idx > pos:
                self._start_skip(pos, "garbage")
            if len(buf) - idx < HEADER_SIZE:
                if final:
                    self._start_skip(idx, "truncated")
                    pos = idx + 1
                    continue
                pos = idx
                break
            _, dev, seq, ticks = HEADER.unpack_from(buf, idx)
            if not 1 <= ticks <= MAX_TICKS:
                self._start_skip(idx, "bad header")
                pos = idx + 1
                continue
            end = idx + block_size(ticks)
            if len(buf) < end:
                if final:
                    self._start_skip(idx, "truncated")
                    pos = idx + 1
                    continue
                pos = idx
                break
            body = bytes(buf[idx + 2:end - 2])
            (stored,) = CRC.unpack_from(buf, end - 2)
            if crc16(body) != stored:
                if len(buf) < end + 2 and not final:
                    # whether the next magic follows is not known yet
                    pos = idx
                    break
                self._start_skip(idx, "crc")
                if buf[end:end + 2] == MAGIC:
                    # discrete corrupted block: its claimed end lines up with another magic
                    self._end_skip(end, events)
                    pos = end
                else:
                    pos = idx + 1
                continue
            self._end_skip(idx, events)
            payload = np.frombuffer(body, dtype="<i2", offset=HEADER_SIZE - 2).astype(np.int16)
            events.append(RawBlock(dev, seq, payload.reshape(ticks, CHANNELS), stored))
            self.blocks_ok += 1
            pos = end
        del buf[:pos]
        self._consumed += pos
        return events

    def flush(self) -> list:
        """Report whatever is left in the buffer as skipped bytes."""
        events = self._parse(final=True)
        n = len(self._buf)
        if n:
            self._start_skip(0, "truncated")
        self._end_skip(n, events)
        self._buf.clear()
        self._consumed += n
        return events


def decode_stream(data: bytes) -> tuple[list[RawBlock], list[Resync]]:
    """Decode a complete byte sequence into intact blocks and resync events."""
    dec = StreamDecoder()
    events = dec.feed(data) + dec.flush()
    blocks = [e for e in events if isinstance(e, RawBlock)]
    resyncs = [e for e in events if isinstance(e, Resync)]
    return blocks, resyncs


# -- emulation ---------------------------------------------------------------

@dataclass(frozen=True)
class TimedBytes:
    t_ns: int  # emission (arrival) time
    device_id: int
    data: bytes


SignalSource = Callable[[np.ndarray], np.ndarray]


def _source_fn(signal_source) -> SignalSource:
    if signal_source is None:
        return lambda idx: np.zeros((len(idx), CHANNELS), dtype=np.int16)
    if callable(signal_source):
        return signal_source
    arr = np.asarray(signal_source)
    if arr.ndim != 2:
        raise ValueError("signal source array must be 2-D")
    if arr.shape[0] == CHANNELS and arr.shape[1] != CHANNELS:
        arr = arr.T
    n = arr.shape[0]

    def take(idx):
        out = np.zeros((len(idx), CHANNELS), dtype=np.int16)
        ok = idx < n
        out[ok] = arr[idx[ok]]
        return out

    return take


def device_sample_count(config: DeviceConfig, duration_s: float) -> int:
    return int(np.floor(duration_s * config.sample_rate_hz * (1 + config.clock_ppm_offset * 1e-6) + 1e-9))


def emulate_device(
    config: DeviceConfig,
    signal_source=None,
    duration_s: float = 1.0,
    tick_count: int = DEFAULT_TICKS,
    seed: int = 0,
    stalls: Sequence[tuple[float, float]] = (),
    noise_counts: float = 300.0,
    start_seq: int = 0,
) -> list[TimedBytes]:
    """Produce the timed byte stream of one device.

    Sample ``k`` of a device is taken at true time ``k / (fs * (1 + ppm))``; the
    value is read from ``signal_source`` at the nearest earlier nominal index, so
    a skewed device samples the same underlying signal on its own clock.  A
    block is emitted once its last sample exists.  ``stalls`` is a list of
    ``(start_s, length_s)`` transport stalls: blocks completing inside a stall
    are delivered together when it ends.  Trailing samples that do not fill a
    whole block are not emitted.
    """
    rate = config.sample_rate_hz * (1 + config.clock_ppm_offset * 1e-6)
    n_total = device_sample_count(config, duration_s)
    n_blocks = n_total // tick_count
    if n_blocks == 0:
        return []
    k = np.arange(n_blocks * tick_count)
    if config.noise_only:
        rng = np.random.default_rng([seed, config.device_id, 0x5C])
        values = np.clip(np.round(rng.normal(0.0, noise_counts, (len(k), CHANNELS))), -32768, 32767)
        values = values.astype(np.int16)
    else:
        nominal = np.floor(k * config.sample_rate_hz / rate + 1e-9).astype(np.int64)
        values = np.asarray(_source_fn(signal_source)(nominal), dtype=np.int16)
    out = []
    for b in range(n_blocks):
        t = (b + 1) * tick_count / rate
        for s0, length in stalls:
            if s0 <= t < s0 + length:
                t = s0 + length
        data = encode_block(config, start_seq + b, values[b * tick_count:(b + 1) * tick_count])
        out.append(TimedBytes(int(round(t * 1e9)), config.device_id, data))
    return out


def merge_streams(streams: Iterable[list[TimedBytes]]) -> list[TimedBytes]:
    """Interleave several timed streams by emission time (stable per device)."""
    merged = [tb for s in streams for tb in s]
    merged.sort(key=lambda tb: tb.t_ns)
    return merged


def write_nrvraw(path, stream: Iterable[TimedBytes | bytes]) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        for item in stream:
            fh.write(item.data if isinstance(item, TimedBytes) else item)
    return path


def read_nrvraw(path) -> bytes:
    return Path(path).read_bytes()


def replay_schedule(blocks: Sequence[RawBlock], tick_count: int = DEFAULT_TICKS) -> list[TimedBytes]:
    """Rebuild a nominal-rate timed stream from decoded blocks (one device or many)."""
    counters: dict[int, int] = {}
    out = []
    for blk in blocks:
        done = counters.get(blk.device_id, 0) + blk.tick_count
        counters[blk.device_id] = done
        t_ns = done * SAMPLE_NS
        out.append(TimedBytes(t_ns, blk.device_id, encode_block(blk.device_id, blk.seq, blk.samples)))
    out.sort(key=lambda tb: tb.t_ns)
    return out


# -- alignment ---------------------------------------------------------------

class ArrivalClock:
    """Estimates when the first sample of each block was produced.

    Arrivals can be late (transport stalls) but never early, so the estimate
    follows the lower envelope: ``ts = min(arrival, prev + T * (1 + slack))``.
    ``slack`` must exceed the worst clock error (2000 ppm).
    """

    def __init__(self, slack_ppm: float = MAX_PPM, rate_hz: int = SAMPLE_RATE_HZ):
        self.slack = slack_ppm * 1e-6
        self.rate = rate_hz
        self._prev_end: float | None = None

    def stamp(self, arrival_ns: int, tick_count: int) -> int:
        dur = tick_count * 1e9 / self.rate
        end = float(arrival_ns)
        if self._prev_end is not None:
            end = min(end, self._prev_end + dur * (1 + self.slack))
        self._prev_end = end
        return int(round(end - dur))


@dataclass(frozen=True, eq=False)
class AlignedChunk:
    sample_index_base: int
    samples: np.ndarray  # (n_ticks, 8 * n_devices) int16
    dropped_ms: float = 0.0
    acq_timestamp_ns: int = 0
    zero_filled: bool = False

    @property
    def n_ticks(self) -> int:
        return self.samples.shape[0]

    def tick_timestamps(self) -> np.ndarray:
        return self.acq_timestamp_ns + np.arange(self.n_ticks, dtype=np.int64) * SAMPLE_NS


@dataclass
class DeviceLedger:
    received: int = 0
    zero_filled: int = 0
    dropped: int = 0
    emitted: int = 0
    gaps: int = 0

    def pending(self) -> int:
        return self.received + self.zero_filled - self.dropped - self.emitted


@dataclass(frozen=True)
class DropEvent:
    device_id: int
    samples: int
    t_ns: int

    @property
    def ms(self) -> float:
        return self.samples * 1000.0 / SAMPLE_RATE_HZ


class _DeviceBuffer:
    def __init__(self):
        self.parts: deque = deque()  # (ts_first_ns, samples)
        self.count = 0
        self.next_seq: int | None = None

    def head_ts(self) -> int:
        return self.parts[0][0]

    def take(self, n: int) -> tuple[np.ndarray, int]:
        ts0 = self.parts[0][0]
        out = []
        need = n
        while need:
            ts, arr = self.parts[0]
            if len(arr) <= need:
                out.append(arr)
                need -= len(arr)
                self.parts.popleft()
            else:
                out.append(arr[:need])
                self.parts[0] = (ts + need * SAMPLE_NS, arr[need:])
                need = 0
        self.count -= n
        return np.concatenate(out), ts0


class Aligner:
    """Merges per-device block queues into aligned multi-device chunks.

    Chunks are emitted only when every device has data.  Before each emission
    the head-sample timestamps are compared; a device whose head is older than
    the newest head by more than one block duration holds surplus samples (its
    clock runs fast) and its oldest samples are discarded, at most
    ``max_drop_ms`` per realignment event.  Sequence gaps are zero-filled and
    flagged.
    """

    def __init__(self, device_ids: Sequence[int], max_drop_ms: float = 60.0,
                 tick_count: int = DEFAULT_TICKS):
        if not device_ids:
            raise ValueError("need at least one device")
        self.device_ids = list(device_ids)
        self.max_drop = int(round(max_drop_ms * SAMPLE_RATE_HZ / 1000))
        self.threshold_ns = tick_count * SAMPLE_NS
        self.tick_count = tick_count
        self._bufs = {d: _DeviceBuffer() for d in self.device_ids}
        self.ledger = {d: DeviceLedger() for d in self.device_ids}
        self.drop_events: list[DropEvent] = []
        self.sample_index = 0

    def push(self, block: RawBlock):
        buf = self._bufs[block.device_id]
        led = self.ledger[block.device_id]
        if buf.next_seq is not None and block.seq != buf.next_seq:
            missing = (block.seq - buf.next_seq) & 0xFFFF
            n = missing * block.tick_count
            zeros = np.zeros((n, CHANNELS), dtype=np.int16)
            buf.parts.append((block.acq_timestamp_ns - n * SAMPLE_NS, zeros))
            buf.count += n
            led.zero_filled += n
            led.gaps += 1
        buf.parts.append((block.acq_timestamp_ns, block.samples))
        buf.count += block.tick_count
        led.received += block.tick_count
        buf.next_seq = (block.seq + 1) & 0xFFFF

    def _realign(self) -> float:
        """Drop surplus samples from devices whose head lags the newest head."""
        dropped_ms = 0.0
        heads = {d: b.head_ts() for d, b in self._bufs.items()}
        newest = max(heads.values())
        for d, b in self._bufs.items():
            lead_ns = newest - heads[d]
            if lead_ns <= self.threshold_ns:
                continue
            n = min(int(round(lead_ns / SAMPLE_NS)), self.max_drop, b.count)
            if n <= 0:
                continue
            _, ts = b.take(n)
            self.ledger[d].dropped += n
            ev = DropEvent(d, n, ts)
            self.drop_events.append(ev)
            dropped_ms = max(dropped_ms, ev.ms)
        return dropped_ms

    def pull(self) -> list[AlignedChunk]:
        out = []
        while all(b.count > 0 for b in self._bufs.values()):
            dropped_ms = self._realign()
            n = min(b.count for b in self._bufs.values())
            if n == 0:
                continue
            n = min(n, self.tick_count)
            parts, stamps = [], []
            for d in self.device_ids:
                arr, ts = self._bufs[d].take(n)
                parts.append(arr)
                stamps.append(ts)
                self.ledger[d].emitted += n
            chunk = AlignedChunk(self.sample_index, np.concatenate(parts, axis=1),
                                 dropped_ms, max(stamps))
            self.sample_index += n
            out.append(chunk)
        return out


class Receiver:
    """Host side of the acquisition stage: per-device decoders, stamping and alignment."""

    def __init__(self, device_ids: Sequence[int], max_drop_ms: float = 60.0):
        self.device_ids = list(device_ids)
        self.decoders = {d: StreamDecoder() for d in self.device_ids}
        self.clocks = {d: ArrivalClock() for d in self.device_ids}
        self.aligner = Aligner(self.device_ids, max_drop_ms)
        self.resyncs: list[Resync] = []

    def receive(self, item: TimedBytes) -> list[AlignedChunk]:
        for ev in self.decoders[item.device_id].feed(item.data):
            if isinstance(ev, Resync):
                self.resyncs.append(ev)
                continue
            if ev.device_id != item.device_id:
                continue
            ts = self.clocks[ev.device_id].stamp(item.t_ns, ev.tick_count)
            blk = RawBlock(ev.device_id, ev.seq, ev.samples, ev.crc, ts)
            self.aligner.push(blk)
        return self.aligner.pull()


def align_streams(stream: Iterable[TimedBytes], device_ids: Sequence[int],
                  max_drop_ms: float = 60.0) -> tuple[list[AlignedChunk], Receiver]:
    rx = Receiver(device_ids, max_drop_ms)
    chunks: list[AlignedChunk] = []
    for item in stream:
        chunks.extend(rx.receive(item))
    return chunks, rx


def iter_blocks(path) -> Iterator[RawBlock]:
    blocks, _ = decode_stream(read_nrvraw(path))
    yield from blocks
