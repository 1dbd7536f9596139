"""Three-stage real-time pipeline: acquisition -> pre-processing -> decoding.

The stages share two structures: a bounded FIFO of aligned raw chunks
(acquisition writes, pre-processing reads) and the rolling feature window
(pre-processing writes, decoding snapshots).  Two drivers run the same stage
objects: :class:`ThreadedRunner` with one thread per stage on the wall clock,
and :class:`VirtualRunner`, a deterministic discrete-event simulation on a
virtual clock.

Compute budgets of the target board are emulated: every pre-processing job
and every inference is padded to ``compute_scale`` times a nominal cost, so
the 5 W mode (scale 2) does the same work twice as slowly as the 10 W mode.
"""
from __future__ import annotations

import csv
import heapq
import io
import queue
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import dsp, framing
from .decoder import Ensemble, EnsembleConfig, Prediction
from .framing import AlignedChunk, TimedBytes
from .handctl import EmulatedHand, encode_command

POWER_MODES = {"FiveW": (2, 2.0), "TenW": (4, 1.0)}  # worker_count, compute_scale
RAW_TICKS_PER_STRIDE = dsp.STRIDE * dsp.DECIMATION  # 200 raw ticks = 20 ms
PREPROC_NS_PER_TICK = 30_000  # 6 ms of DSP per 20 ms stride at 10 W
INFER_NS_PER_MODEL = 47_000_000  # not a multiple of the 20 ms stride: no phase locking
TICK_NS = framing.SAMPLE_NS


@dataclass(frozen=True)
class PipelineConfig:
    power_mode: str = "TenW"
    raw_queue_capacity_ms: float = 200.0
    model_count: int = 1
    debug_sink: Optional[str] = None  # file path or "tcp://host:port"
    max_discard_ms: float = 60.0
    preproc_ns_per_tick: int = PREPROC_NS_PER_TICK
    infer_ns_per_model: int = INFER_NS_PER_MODEL
    preproc_stalls: tuple = ()  # (start_s, length_s) windows where pre-processing is frozen

    def __post_init__(self):
        if self.power_mode not in POWER_MODES:
            raise ValueError(f"power_mode must be one of {sorted(POWER_MODES)}")
        if self.raw_queue_capacity_ms <= 0 or self.max_discard_ms <= 0:
            raise ValueError("capacities must be positive")
        if not 1 <= self.model_count <= 5:
            raise ValueError("model_count must be 1-5")
        if self.preproc_ns_per_tick < 0 or self.infer_ns_per_model < 0:
            raise ValueError("costs must be non-negative")

    @property
    def worker_count(self) -> int:
        return POWER_MODES[self.power_mode][0]

    @property
    def compute_scale(self) -> float:
        return POWER_MODES[self.power_mode][1]

    @property
    def capacity_ticks(self) -> int:
        return int(round(self.raw_queue_capacity_ms * framing.SAMPLE_RATE_HZ / 1000))

    @property
    def max_discard_ticks(self) -> int:
        return int(round(self.max_discard_ms * framing.SAMPLE_RATE_HZ / 1000))

    def preproc_cost_ns(self, ticks: int) -> int:
        return int(self.compute_scale * self.preproc_ns_per_tick * ticks)

    def inference_cost_ns(self, n_models: int) -> int:
        return int(self.compute_scale * self.infer_ns_per_model * n_models)

    def stall_end_ns(self, t_ns: int) -> Optional[int]:
        """End of the stall window containing ``t_ns``, if any."""
        for start, length in self.preproc_stalls:
            s, e = int(start * 1e9), int((start + length) * 1e9)
            if s <= t_ns < e:
                return e
        return None


# -- raw FIFO and the drop policy ------------------------------------------------

@dataclass(frozen=True)
class DiscardEvent:
    t_ns: int
    ticks: int
    reason: str  # "stale" | "overflow" | "align"

    @property
    def ms(self) -> float:
        return self.ticks * 1000.0 / framing.SAMPLE_RATE_HZ


@dataclass
class PipelineLedger:
    """Aligned raw ticks: received == processed + discarded + pending."""
    received: int = 0
    processed: int = 0
    discarded: int = 0
    pending: int = 0

    def balanced(self) -> bool:
        return self.received == self.processed + self.discarded + self.pending


def plan_discard(chunk_ticks: Sequence[int], stride_ticks: int, max_ticks: int) -> int:
    """Number of oldest chunks to drop so the backlog approaches one stride.

    Whole chunks only, never more than ``max_ticks`` in total, never below one
    stride of backlog.
    """
    backlog = sum(chunk_ticks)
    dropped = k = 0
    for n in chunk_ticks:
        if backlog - n < stride_ticks or dropped + n > max_ticks:
            break
        backlog -= n
        dropped += n
        k += 1
    return k


def freshest_policy(fifo: "RawFifo", t_ns: int, stride_ticks: int = RAW_TICKS_PER_STRIDE,
                    max_ticks: int = 600) -> Optional[DiscardEvent]:
    """Discard stale raw data when more than one stride is waiting (one event, <= ``max_ticks``)."""
    with fifo.lock:
        if fifo.ticks <= stride_ticks:
            return None
        k = plan_discard([c.n_ticks for c in fifo.chunks], stride_ticks, max_ticks)
        if k == 0:
            return None
        return fifo._drop_oldest(k, t_ns, "stale")


class RawFifo:
    """Bounded queue of aligned chunks; a full queue drops its oldest chunks, never blocks."""

    def __init__(self, capacity_ticks: int, max_event_ticks: int = 600):
        self.capacity = capacity_ticks
        self.max_event = max_event_ticks
        self.chunks: deque = deque()
        self.ticks = 0
        self.lock = threading.Lock()
        self.ledger = PipelineLedger()
        self.events: list[DiscardEvent] = []

    def _drop_oldest(self, k: int, t_ns: int, reason: str) -> DiscardEvent:
        n = 0
        for _ in range(k):
            n += self.chunks.popleft().n_ticks
        self.ticks -= n
        self.ledger.discarded += n
        ev = DiscardEvent(t_ns, n, reason)
        self.events.append(ev)
        return ev

    def push(self, chunk: AlignedChunk, t_ns: int = 0):
        with self.lock:
            self.ledger.received += chunk.n_ticks
            self.chunks.append(chunk)
            self.ticks += chunk.n_ticks
            while self.ticks > self.capacity:
                k = n = 0
                for c in self.chunks:
                    if self.ticks - n <= self.capacity or n + c.n_ticks > self.max_event or len(self.chunks) - k == 1:
                        break
                    n += c.n_ticks
                    k += 1
                if k == 0:
                    break
                self._drop_oldest(k, t_ns, "overflow")

    def take_all(self) -> list[AlignedChunk]:
        with self.lock:
            out = list(self.chunks)
            self.chunks.clear()
            n = sum(c.n_ticks for c in out)
            self.ticks -= n
            self.ledger.processed += n
            return out

    def __len__(self):
        return self.ticks

    def snapshot_ledger(self) -> PipelineLedger:
        with self.lock:
            led = PipelineLedger(**vars(self.ledger))
            led.pending = self.ticks
            return led


# -- stages ------------------------------------------------------------------------

class PreprocStage:
    """Filters aligned raw chunks and emits feature vectors; owns DSP state."""

    def __init__(self, channels: int = 16, channel_scale=None):
        self.pre = dsp.Preprocessor(channels)
        self.fx = dsp.FeatureExtractor(channels, scale=channel_scale)

    def process(self, chunks: Sequence[AlignedChunk]) -> list[dsp.FeatureVector]:
        if not chunks:
            return []
        raw = np.concatenate([c.samples for c in chunks])
        ts = np.concatenate([c.tick_timestamps() for c in chunks])
        keep = self.pre.decimation_offsets(len(raw))
        return self.fx.push(self.pre.process(raw), ts[keep])


class SharedWindow:
    """Rolling feature window with consistent snapshots for the decoder."""

    def __init__(self, rows: int = 16 * dsp.N_FEATURES, length: int = dsp.SEQ_LEN):
        self.window = dsp.FeatureWindow(rows, length)
        self.cond = threading.Condition()

    def push(self, vectors: Sequence[dsp.FeatureVector]):
        if not vectors:
            return
        with self.cond:
            for v in vectors:
                self.window.push(v)
            self.cond.notify_all()

    @property
    def version(self) -> int:
        return self.window.version

    def snapshot(self, after_version: int = -1):
        """(matrix, newest_ts, version) if full and newer than ``after_version``."""
        with self.cond:
            w = self.window
            if not w.full or w.version <= after_version:
                return None
            return w.matrix(), w.newest_timestamp_ns, w.version


# -- sinks -------------------------------------------------------------------------

def debug_record(pred: Prediction) -> str:
    p = ",".join(f"{x:.6f}" for x in pred.probs)
    s = ",".join(str(int(x)) for x in pred.states)
    return f"{pred.produced_timestamp_ns},{p},{s},{pred.lag_ns}\n"


class DebugSink:
    """Newline records to a file or a TCP peer, written by a background thread.

    The producer side never blocks: records that do not fit in the queue, or
    arrive after the link failed, are counted as dropped.
    """

    def __init__(self, target: str, capacity: int = 1024):
        self.target = target
        self.q: queue.Queue = queue.Queue(capacity)
        self.dropped = 0
        self.errors = 0
        self.written = 0
        self._failed = False
        self._thread = threading.Thread(target=self._run, daemon=True, name="debug-sink")
        self._thread.start()

    def _open(self):
        if self.target.startswith("tcp://"):
            host, port = self.target[6:].rsplit(":", 1)
            sock = socket.create_connection((host, int(port)), timeout=2.0)
            return sock.makefile("w", encoding="ascii")
        return open(self.target, "w", encoding="ascii")

    def _run(self):
        out = None
        try:
            out = self._open()
        except OSError:
            self.errors += 1
            self._failed = True
        while True:
            line = self.q.get()
            if line is None:
                break
            if self._failed:
                self.dropped += 1
                continue
            try:
                out.write(line)
                self.written += 1
            except OSError:
                self.errors += 1
                self._failed = True
        if out is not None:
            try:
                out.close()
            except OSError:
                self.errors += 1

    def __call__(self, pred: Prediction):
        if self._failed:
            self.dropped += 1
            return
        try:
            self.q.put_nowait(debug_record(pred))
        except queue.Full:
            self.dropped += 1

    def close(self, timeout: float = 5.0):
        try:
            self.q.put(None, timeout=timeout)
        except queue.Full:
            pass
        self._thread.join(timeout)


class HandSink:
    """Sends each prediction over the emulated serial link to an emulated hand."""

    def __init__(self, hand: Optional[EmulatedHand] = None):
        self.hand = hand or EmulatedHand()
        self.frames = 0

    def __call__(self, pred: Prediction):
        self.hand.advance_to(pred.produced_timestamp_ns / 1e9)
        self.hand.feed(encode_command(pred))
        self.frames += 1


# -- report -----------------------------------------------------------------------

@dataclass
class LatencyReport:
    mode: str
    model_count: int
    duration_s: float
    lags_ns: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    inference_ns: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    produced_ns: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    discard_events: list = field(default_factory=list)
    ledger: PipelineLedger = field(default_factory=PipelineLedger)
    device_ledgers: dict = field(default_factory=dict)
    predictions: list = field(default_factory=list)
    underruns: int = 0
    sink_errors: int = 0
    debug_dropped: int = 0
    resyncs: int = 0

    @classmethod
    def from_predictions(cls, preds: Sequence[Prediction], mode: str = "", model_count: int = 1,
                         duration_s: float = 0.0, **kw) -> "LatencyReport":
        return cls(mode, model_count, duration_s,
                   np.array([p.lag_ns for p in preds], dtype=np.int64),
                   np.array([p.inference_ns for p in preds], dtype=np.int64),
                   np.array([p.produced_timestamp_ns for p in preds], dtype=np.int64),
                   predictions=list(preds), **kw)

    @property
    def n(self) -> int:
        return len(self.lags_ns)

    def median_lag_ms(self) -> float:
        return float(np.median(self.lags_ns)) / 1e6 if self.n else float("nan")

    def p95_lag_ms(self) -> float:
        return float(np.percentile(self.lags_ns, 95)) / 1e6 if self.n else float("nan")

    def median_inference_ms(self) -> float:
        return float(np.median(self.inference_ns)) / 1e6 if self.n else float("nan")

    def throughput_hz(self) -> float:
        """Predictions per second while the decoder was producing."""
        if self.n >= 2:
            span = (self.produced_ns[-1] - self.produced_ns[0]) / 1e9
            if span > 0:
                return (self.n - 1) / span
        if self.n and self.duration_s > 0:
            return self.n / self.duration_s
        return 0.0

    def drops_ms(self) -> float:
        return sum(e.ms for e in self.discard_events)

    def max_discard_ms(self) -> float:
        return max((e.ms for e in self.discard_events), default=0.0)

    def conservation_ok(self) -> bool:
        """Pipeline ledger and every device ledger balance exactly."""
        if not self.ledger.balanced():
            return False
        for led in self.device_ledgers.values():
            if led.received + led.zero_filled != led.dropped + led.emitted + led.pending():
                return False
            if led.emitted != self.ledger.received:
                return False
        return True


BENCH_COLUMNS = ("mode", "model_count", "median_lag_ms", "p95_lag_ms", "throughput_hz",
                 "drops_ms", "median_inference_ms", "predictions")


def measure(reports: Sequence[LatencyReport]) -> str:
    """Benchmark CSV, one row per report with at least one prediction."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in reports:
        if not r.n:
            continue
        w.writerow([r.mode, r.model_count, f"{r.median_lag_ms():.3f}", f"{r.p95_lag_ms():.3f}",
                    f"{r.throughput_hz():.3f}", f"{r.drops_ms():.1f}",
                    f"{r.median_inference_ms():.3f}", r.n])
    return buf.getvalue()


def write_predictions(path, preds: Sequence[Prediction]):
    from .decoder import PREDICTION_CSV_HEADER
    with open(path, "w") as fh:
        fh.write(PREDICTION_CSV_HEADER + "\n")
        for p in preds:
            fh.write(p.csv_row() + "\n")


# -- sources -----------------------------------------------------------------------

def emulated_source(signal: Optional[np.ndarray], duration_s: float, ppm=(0.0, 0.0),
                    transport_stalls=(), seed: int = 0, noise_counts: float = 300.0) -> list[TimedBytes]:
    """Timed wire bytes of two 8-channel devices.

    ``signal`` is (16, N) int16 counts at 10 kHz, or ``None`` for noise only.
    """
    streams = []
    for dev in range(2):
        cfg = framing.DeviceConfig(dev, clock_ppm_offset=float(ppm[dev]), noise_only=signal is None)
        src = None if signal is None else np.asarray(signal)[dev * 8:(dev + 1) * 8].T
        streams.append(framing.emulate_device(cfg, src, duration_s, seed=seed, stalls=transport_stalls,
                                              noise_counts=noise_counts))
    return framing.merge_streams(streams)


def replay_source(path) -> list[TimedBytes]:
    return framing.replay_schedule(list(framing.iter_blocks(path)))


# -- runners -----------------------------------------------------------------------

class _Core:
    """State shared by both drivers."""

    def __init__(self, cfg: PipelineConfig, ensemble: EnsembleConfig, device_ids=(0, 1)):
        self.cfg = cfg
        self.device_ids = list(device_ids)
        self.receiver = framing.Receiver(self.device_ids, cfg.max_discard_ms)
        self.fifo = RawFifo(cfg.capacity_ticks, cfg.max_discard_ticks)
        self.preproc = PreprocStage(8 * len(self.device_ids), ensemble.channel_scale)
        self.window = SharedWindow(8 * len(self.device_ids) * dsp.N_FEATURES)
        self.ensemble = Ensemble(ensemble)
        self.predictions: list[Prediction] = []
        self.sinks: list[Callable] = []
        self.sink_errors = 0
        self.underruns = 0
        self.debug: Optional[DebugSink] = DebugSink(cfg.debug_sink) if cfg.debug_sink else None

    def acquire(self, item: TimedBytes, t_ns: int):
        for chunk in self.receiver.receive(item):
            self.fifo.push(chunk, t_ns)

    def emit(self, pred: Prediction):
        self.predictions.append(pred)
        for sink in self.sinks:
            try:
                sink(pred)
            except Exception:  # a failing sink must not stall decoding
                self.sink_errors += 1
        if self.debug is not None:
            self.debug(pred)

    def report(self, duration_s: float) -> LatencyReport:
        if self.debug is not None:
            self.debug.close()
        aligner = self.receiver.aligner
        events = [DiscardEvent(e.t_ns, e.samples, "align") for e in aligner.drop_events]
        events += list(self.fifo.events)
        events.sort(key=lambda e: e.t_ns)
        return LatencyReport.from_predictions(
            self.predictions, self.cfg.power_mode, self.cfg.model_count, duration_s,
            discard_events=events, ledger=self.fifo.snapshot_ledger(),
            device_ledgers={d: framing.DeviceLedger(**vars(l)) for d, l in aligner.ledger.items()},
            underruns=self.underruns, sink_errors=self.sink_errors,
            debug_dropped=self.debug.dropped + self.debug.errors if self.debug else 0,
            resyncs=len(self.receiver.resyncs))


class VirtualRunner:
    """Deterministic single-context run on a virtual nanosecond clock.

    Pre-processing and decoding are servers: each job occupies its stage for
    the emulated compute cost.  Real computation happens at job start; results
    land at job end.
    """

    def __init__(self, cfg: PipelineConfig, ensemble: EnsembleConfig, sinks: Sequence[Callable] = ()):
        self.cfg = cfg
        self.ensemble_cfg = ensemble
        self.extra_sinks = list(sinks)

    def run(self, source: Sequence[TimedBytes], duration_s: float) -> LatencyReport:
        core = _Core(self.cfg, self.ensemble_cfg)
        core.sinks = self.extra_sinks
        end_ns = int(duration_s * 1e9)
        heap: list = []
        seq = 0

        def push(t, kind, payload=None):
            nonlocal seq
            heapq.heappush(heap, (t, seq, kind, payload))
            seq += 1

        for item in source:
            if item.t_ns <= end_ns:
                push(item.t_ns, "arrive", item)
        pre_busy = dec_busy = False
        pre_wake_pending = False
        last_version = -1

        def start_preproc(t):
            nonlocal pre_busy, pre_wake_pending
            if pre_busy or not len(core.fifo):
                return
            stall_end = self.cfg.stall_end_ns(t)
            if stall_end is not None:
                if not pre_wake_pending:
                    pre_wake_pending = True
                    push(stall_end, "pre_wake")
                return
            freshest_policy(core.fifo, t, RAW_TICKS_PER_STRIDE, self.cfg.max_discard_ticks)
            chunks = core.fifo.take_all()
            vectors = core.preproc.process(chunks)
            pre_busy = True
            push(t + self.cfg.preproc_cost_ns(sum(c.n_ticks for c in chunks)), "pre_done", vectors)

        def start_decoder(t):
            nonlocal dec_busy, last_version
            if dec_busy:
                return
            snap = core.window.snapshot(last_version)
            if snap is None:
                return
            mat, newest, last_version = snap
            cost = self.cfg.inference_cost_ns(len(core.ensemble))
            probs = core.ensemble.evaluate(mat)
            pred = Prediction(probs, probs > core.ensemble.config.threshold, newest,
                              max(t + cost, newest), cost)
            dec_busy = True
            push(t + cost, "dec_done", pred)

        while heap:
            t, _, kind, payload = heapq.heappop(heap)
            if t > end_ns:
                break
            if kind == "arrive":
                core.acquire(payload, t)
            elif kind == "pre_wake":
                pre_wake_pending = False
            elif kind == "pre_done":
                pre_busy = False
                core.window.push(payload)
            elif kind == "dec_done":
                dec_busy = False
                core.emit(payload)
            start_preproc(t)
            start_decoder(t)
        return core.report(duration_s)


class ThreadedRunner:
    """One thread per stage, paced by the wall clock."""

    def __init__(self, cfg: PipelineConfig, ensemble: EnsembleConfig, sinks: Sequence[Callable] = (),
                 underrun_ms: float = 100.0):
        self.cfg = cfg
        self.ensemble_cfg = ensemble
        self.extra_sinks = list(sinks)
        self.underrun_ns = int(underrun_ms * 1e6)

    def run(self, source: Sequence[TimedBytes], duration_s: float) -> LatencyReport:
        core = _Core(self.cfg, self.ensemble_cfg)
        core.sinks = self.extra_sinks
        cfg = self.cfg
        stop = threading.Event()
        fifo_cond = threading.Condition()
        t0 = time.monotonic_ns()
        clock = lambda: time.monotonic_ns() - t0
        end_ns = int(duration_s * 1e9)

        def sleep_until(t_ns):
            while not stop.is_set():
                dt = t_ns - clock()
                if dt <= 0:
                    return
                stop.wait(min(dt / 1e9, 0.05))

        def acquisition():
            for item in source:
                if item.t_ns > end_ns or stop.is_set():
                    break
                sleep_until(item.t_ns)
                if stop.is_set():
                    break
                now = clock()
                core.acquire(TimedBytes(now, item.device_id, item.data), now)
                with fifo_cond:
                    fifo_cond.notify()

        def preprocessing():
            idle_since = clock()
            underrun = False
            while not stop.is_set():
                with fifo_cond:
                    if not len(core.fifo):
                        fifo_cond.wait(0.02)
                now = clock()
                if not len(core.fifo):
                    if not underrun and now - idle_since > self.underrun_ns:
                        core.underruns += 1
                        underrun = True
                    continue
                stall_end = cfg.stall_end_ns(now)
                if stall_end is not None:
                    sleep_until(stall_end)
                    continue
                started = clock()
                freshest_policy(core.fifo, started, RAW_TICKS_PER_STRIDE, cfg.max_discard_ticks)
                chunks = core.fifo.take_all()
                vectors = core.preproc.process(chunks)
                sleep_until(started + cfg.preproc_cost_ns(sum(c.n_ticks for c in chunks)))
                core.window.push(vectors)
                idle_since = clock()
                underrun = False

        def decoding():
            last = -1
            cost = cfg.inference_cost_ns(len(core.ensemble))

            def hook(n, started):
                sleep_until(started + cost)
                return clock()

            while not stop.is_set():
                with core.window.cond:
                    if core.window.version <= last or not core.window.window.full:
                        core.window.cond.wait(0.02)
                snap = core.window.snapshot(last)
                if snap is None:
                    continue
                mat, newest, last = snap
                started = clock()
                probs = core.ensemble.evaluate(mat)
                produced = max(hook(len(core.ensemble), started), newest)
                if stop.is_set():
                    break
                core.emit(Prediction(probs, probs > core.ensemble.config.threshold, newest,
                                     produced, produced - started))

        threads = [threading.Thread(target=f, name=f.__name__, daemon=True)
                   for f in (acquisition, preprocessing, decoding)]
        for th in threads:
            th.start()
        sleep_until(end_ns)
        stop.set()
        with fifo_cond:
            fifo_cond.notify_all()
        with core.window.cond:
            core.window.cond.notify_all()
        for th in threads:
            th.join()
        return core.report(duration_s)


def run(cfg: PipelineConfig, source: Sequence[TimedBytes], ensemble: EnsembleConfig,
        hand_sink: Optional[Callable] = None, duration_s: float = 10.0,
        virtual: bool = False) -> LatencyReport:
    sinks = [hand_sink] if hand_sink is not None else []
    runner = (VirtualRunner if virtual else ThreadedRunner)(cfg, ensemble, sinks)
    return runner.run(source, duration_s)


def benchmark(ensembles: dict, modes: Sequence[str], duration_s: float, source_fn: Callable,
              virtual: bool = False, **cfg_kw) -> list[LatencyReport]:
    """Runs every (mode, model_count) pair. ``ensembles`` maps model_count -> EnsembleConfig."""
    reports = []
    if duration_s <= 0:
        return reports
    for mode in modes:
        for count, ens in sorted(ensembles.items()):
            cfg = PipelineConfig(power_mode=mode, model_count=count, **cfg_kw)
            reports.append(run(cfg, source_fn(), ens, None, duration_s, virtual))
    return reports


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line; returns (slope, intercept, r_squared)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)
