"""Post-hoc analysis of simulation logs.

Bandwidth is aggregated per device per second (10 ticks) and judged by a
nearest-rank percentile over the pooled samples, counted from each device's
start. Capacity is the largest device count whose percentile stays under a
link budget.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import simnet
from .crypto import PACKET_SIZE
from .simnet import EventRecord, SimConfig

log = logging.getLogger(__name__)

MS_PER_SECOND = 1000


class NoData(ValueError):
    """Nothing to analyse (empty log or empty sample set)."""


class NonMonotoneProbe(RuntimeWarning):
    pass


# -- log parsing -------------------------------------------------------------

@dataclass
class Log:
    header: Optional[dict]
    records: List[EventRecord]
    errors: List[Tuple[int, str]] = field(default_factory=list)

    @property
    def config(self) -> Optional[SimConfig]:
        if self.header is None:
            return None
        return SimConfig.from_dict(self.header["config"])

    @property
    def start_ticks(self) -> Optional[np.ndarray]:
        if self.header is None:
            return None
        return np.asarray(self.header["start_ticks"], dtype=np.int64)


_FIELDS = EventRecord._fields


def parse_log(lines: Iterable[str]) -> Log:
    """Parse JSON-lines log text. Corrupt lines are skipped and reported by number."""
    header, records, errors = None, [], []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            if "format" in obj:
                if header is not None:
                    raise ValueError("second header line")
                if obj["format"] != simnet.LOG_FORMAT:
                    raise ValueError(f"unknown log format {obj['format']!r}")
                header = obj
                continue
            rec = EventRecord(**{k: obj[k] for k in _FIELDS})
            if rec.comm_type not in ("MESSAGE", "DIGEST", "REQUEST", "RESPONSE"):
                raise ValueError(f"unknown comm_type {rec.comm_type!r}")
            if not isinstance(rec.size_bytes, int) or rec.size_bytes < 0:
                raise ValueError("bad size_bytes")
            records.append(rec)
        except (ValueError, KeyError, TypeError) as exc:
            errors.append((lineno, str(exc)))
    for lineno, msg in errors:
        log.warning("log line %d skipped: %s", lineno, msg)
    return Log(header, records, errors)


def load_log(path: Union[str, os.PathLike]) -> Log:
    with open(path, encoding="utf-8") as fh:
        return parse_log(fh)


def _as_log(source) -> Log:
    if isinstance(source, Log):
        return source
    if isinstance(source, simnet.SimResult):
        return parse_log(io.StringIO(source.log_text()))
    if isinstance(source, (str, os.PathLike)):
        return load_log(source)
    return parse_log(source)


# -- bandwidth ---------------------------------------------------------------

@dataclass
class BandwidthSeries:
    """Per-device per-second bit counts, shape (seconds, devices)."""
    ingress_bps: np.ndarray
    egress_bps: np.ndarray
    start_second: np.ndarray
    tick_max_bits: np.ndarray  # per device, largest single-tick ingress+egress

    @property
    def combined_bps(self) -> np.ndarray:
        return self.ingress_bps + self.egress_bps

    @property
    def devices(self) -> int:
        return self.ingress_bps.shape[1]

    def samples(self, which: str = "combined") -> np.ndarray:
        """Pooled per-device-per-second samples, each device from its start second."""
        data = {"combined": self.combined_bps, "ingress": self.ingress_bps,
                "egress": self.egress_bps}[which]
        parts = [data[s:, i] for i, s in enumerate(self.start_second)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def node_max(self, which: str = "combined") -> np.ndarray:
        data = {"combined": self.combined_bps, "ingress": self.ingress_bps,
                "egress": self.egress_bps}[which]
        if data.size == 0:
            return np.zeros(self.devices, dtype=np.int64)
        return data.max(axis=0)


def _series_from_ticks(ingress, egress, start_ticks, tick_ms) -> BandwidthSeries:
    ticks, n = ingress.shape
    per_sec = MS_PER_SECOND // tick_ms
    seconds = math.ceil(ticks / per_sec)
    pad = seconds * per_sec - ticks
    if pad:
        ingress = np.vstack([ingress, np.zeros((pad, n), ingress.dtype)])
        egress = np.vstack([egress, np.zeros((pad, n), egress.dtype)])
    ing = ingress.reshape(seconds, per_sec, n).sum(axis=1) * 8
    eg = egress.reshape(seconds, per_sec, n).sum(axis=1) * 8
    tick_max = ((ingress + egress) * 8).max(axis=0) if ticks else np.zeros(n, np.int64)
    start_second = (np.asarray(start_ticks, dtype=np.int64) * tick_ms) // MS_PER_SECOND
    return BandwidthSeries(ing, eg, start_second, tick_max)


def bandwidth(source) -> BandwidthSeries:
    """Per-second bandwidth from a log (path, lines, :class:`Log`) or a SimResult.

    A transmission debits its size once to the sender's egress and once to the
    ingress of every receiver that heard it.
    """
    if isinstance(source, simnet.SimResult):
        cfg = source.config
        return _series_from_ticks(source.ingress, source.egress, source.start_ticks,
                                  cfg.tick_ms)
    lg = _as_log(source)
    if lg.header is None:
        if lg.records:
            raise NoData("log has records but no header")
        return BandwidthSeries(*(np.zeros((0, 0), np.int64) for _ in range(2)),
                               np.zeros(0, np.int64), np.zeros(0, np.int64))
    cfg = lg.config
    ticks, n = cfg.n_ticks, cfg.devices
    ingress = np.zeros((ticks, n), dtype=np.int64)
    egress = np.zeros((ticks, n), dtype=np.int64)
    seen = set()
    for r in lg.records:
        t = r.timestamp_ms // cfg.tick_ms
        if r.transmission_id not in seen:
            seen.add(r.transmission_id)
            egress[t, r.sender_id] += r.size_bytes
        if r.receiver_id is not None:
            ingress[t, r.receiver_id] += r.size_bytes
    return _series_from_ticks(ingress, egress, lg.start_ticks, cfg.tick_ms)


def percentile(series, p: float, which: str = "combined") -> float:
    """Nearest-rank percentile: the smallest sample with at least p% of samples <= it."""
    if not 0 < p <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    if isinstance(series, BandwidthSeries):
        x = series.samples(which)
    else:
        x = np.asarray(series)
    if x.size == 0:
        raise NoData("no samples")
    x = np.sort(x, axis=None)
    rank = max(1, math.ceil(p / 100.0 * x.size))
    return float(x[rank - 1])


# -- capacity ----------------------------------------------------------------

PROBE_SEEDS = (0, 1, 2)


@dataclass
class CapacityResult:
    percentile: float
    threshold_bps: float
    max_devices: int
    trace: List[Tuple[int, float]]  # (devices, median percentile bps) per probe
    capped: bool = False
    linear_fallback: bool = False


class ProbeCache:
    """Pooled bandwidth samples per (devices, seed), shared across percentiles."""

    def __init__(self, template: SimConfig, seeds: Sequence[int] = PROBE_SEEDS,
                 runner: Optional[Callable[[SimConfig], np.ndarray]] = None):
        self.template = template
        self.seeds = tuple(seeds)
        self.runner = runner or _pooled_samples
        self._samples: Dict[Tuple[int, int], np.ndarray] = {}

    def samples(self, n: int, seed: int) -> np.ndarray:
        key = (n, seed)
        if key not in self._samples:
            self._samples[key] = self.runner(self.template.replace(devices=n, seed=seed))
        return self._samples[key]

    def value(self, n: int, p: float) -> float:
        return float(np.median([percentile(self.samples(n, s), p) for s in self.seeds]))

    @property
    def runs(self) -> int:
        return len(self._samples)


def _pooled_samples(cfg: SimConfig) -> np.ndarray:
    return bandwidth(simnet.run(cfg, keep_records=False)).samples()


def _linear_scan(value: Callable[[int], float], threshold: float, limit: int) -> Tuple[int, bool]:
    for n in range(1, limit + 1):
        if value(n) >= threshold:
            return n - 1, False
    return limit, True


def capacity_search(template: SimConfig, p: float = 95, threshold_bps: float =
                    simnet.BLUETOOTH_CAPACITY_BPS, max_devices: int = 4096,
                    cache: Optional[ProbeCache] = None) -> CapacityResult:
    """Largest device count whose median-over-seeds percentile stays below the threshold.

    Doubling finds a failing size, bisection narrows it down. Bandwidth is
    assumed to grow with device count; if the probes contradict that, the
    search falls back to a linear scan and logs a warning.
    """
    if threshold_bps <= 0:
        raise ValueError("threshold must be positive")
    cache = cache or ProbeCache(template)
    trace: Dict[int, float] = {}

    def value(n: int) -> float:
        if n not in trace:
            trace[n] = cache.value(n, p)
        return trace[n]

    def passes(n: int) -> bool:
        return value(n) < threshold_bps

    lo, hi = 0, None
    n = 1
    while hi is None:
        if not passes(n):
            hi = n
        elif n == max_devices:
            lo = n
            break
        else:
            lo = n
            n = min(2 * n, max_devices)
    capped = hi is None
    if hi is not None:
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if passes(mid):
                lo = mid
            else:
                hi = mid

    probes = sorted(trace.items())
    failed = False
    monotone = True
    for _, v in probes:
        if v >= threshold_bps:
            failed = True
        elif failed:
            monotone = False
    fallback = False
    if not monotone:
        log.warning("capacity probes are not monotone in device count; "
                    "falling back to a linear scan")
        limit = max(n for n, _ in probes)
        lo, capped = _linear_scan(value, threshold_bps, limit)
        fallback = True
    return CapacityResult(p, threshold_bps, lo, sorted(trace.items()), capped, fallback)


def capacity_sweep(template: SimConfig, percentiles: Sequence[float] = (95, 90, 85),
                   threshold_bps: float = simnet.BLUETOOTH_CAPACITY_BPS,
                   max_devices: int = 4096, seeds: Sequence[int] = PROBE_SEEDS,
                   ) -> Dict[float, CapacityResult]:
    """Capacity at several percentiles; simulation runs are shared between them."""
    cache = ProbeCache(template, seeds)
    return {p: capacity_search(template, p, threshold_bps, max_devices, cache)
            for p in percentiles}


# -- delivery ----------------------------------------------------------------

@dataclass
class MessageDelivery:
    comm_id: str
    origin: int
    created_ms: int
    reached: int
    needed: int
    delivery_ms: Optional[int]  # None until every other device has it


@dataclass
class DeliveryStats:
    messages: Dict[str, MessageDelivery]
    time_to_keep_ms: int

    def times(self) -> np.ndarray:
        return np.array(sorted(m.delivery_ms for m in self.messages.values()
                               if m.delivery_ms is not None), dtype=np.int64)

    @property
    def undelivered(self) -> List[str]:
        return sorted(k for k, m in self.messages.items() if m.delivery_ms is None)

    @property
    def over_time_to_keep(self) -> List[str]:
        return sorted(k for k, m in self.messages.items()
                      if m.delivery_ms is not None and m.delivery_ms > self.time_to_keep_ms)

    def median(self) -> float:
        t = self.times()
        if t.size == 0:
            raise NoData("no fully delivered messages")
        return float(np.median(t))

    def cdf(self) -> List[Tuple[int, float]]:
        return _cdf_points(self.times())


def delivery_times(source, only: Optional[Iterable[str]] = None,
                   created_before_ms: Optional[int] = None) -> DeliveryStats:
    """Time for each message to reach every other device.

    A message is created when its originator first transmits it. A device
    receives it one tick after the first transmission it hears that carries
    the message (directly or inside a response). For a device that started
    after creation, its share of the delay is counted from its start.

    ``only`` restricts to the given comm ids; ``created_before_ms`` drops
    messages created too late to finish within the run.
    """
    lg = _as_log(source)
    if lg.header is None:
        raise NoData("log has no header")
    cfg = lg.config
    tick = cfg.tick_ms
    start_ms = lg.start_ticks * tick
    wanted = None if only is None else set(only)
    origin: Dict[str, Tuple[int, int]] = {}
    receipts: Dict[str, Dict[int, int]] = {}
    for r in lg.records:
        if r.comm_type == "MESSAGE":
            cids = (r.comm_id,)
            if r.comm_id not in origin:
                origin[r.comm_id] = (r.sender_id, r.timestamp_ms)
        elif r.comm_type == "RESPONSE":
            cids = tuple(r.comm_id.split(",")) if r.comm_id else ()
        else:
            continue
        if r.receiver_id is None:
            continue
        for cid in cids:
            got = receipts.setdefault(cid, {})
            at = r.timestamp_ms + tick
            if at < got.get(r.receiver_id, at + 1):
                got[r.receiver_id] = at
    out = {}
    n = cfg.devices
    for cid, (src, created) in origin.items():
        if wanted is not None and cid not in wanted:
            continue
        if created_before_ms is not None and created >= created_before_ms:
            continue
        got = receipts.get(cid, {})
        worst, reached = 0, 0
        for j in range(n):
            if j == src:
                continue
            if j in got:
                reached += 1
                worst = max(worst, got[j] - max(created, int(start_ms[j])))
        needed = n - 1
        out[cid] = MessageDelivery(cid, src, created, reached, needed,
                                   worst if reached == needed else None)
    return DeliveryStats(out, cfg.time_to_keep_ms)


# -- throughput --------------------------------------------------------------

def decryption_throughput(per_packet_ms: float, packet_bytes: int = PACKET_SIZE) -> float:
    """Mb/s a device can decrypt if each packet takes ``per_packet_ms``."""
    if per_packet_ms <= 0:
        raise ValueError("decryption time must be positive")
    return packet_bytes * 8 / per_packet_ms / 1000.0


# -- plots -------------------------------------------------------------------

CSV_COLUMNS = {
    "bandwidth_cdf": ("bps", "cdf"),
    "capacity": ("spacing_ft", "percentile", "max_devices"),
    "delivery_cdf": ("delivery_ms", "cdf"),
}


def _cdf_points(values) -> List[Tuple[float, float]]:
    x = np.sort(np.asarray(values).ravel())
    if x.size == 0:
        return []
    uniq, idx = np.unique(x, return_index=True)
    counts = np.append(idx[1:], x.size)
    return [(v.item(), c / x.size) for v, c in zip(uniq, counts)]


def _write_csv(path: str, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _write_svg(path: str, kind: str, rows) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "meshmsg"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if kind == "capacity":
        by_p: Dict[float, list] = {}
        for spacing, p, cap in rows:
            by_p.setdefault(p, []).append((spacing, cap))
        for p in sorted(by_p):
            pts = sorted(by_p[p])
            ax.plot([a for a, _ in pts], [b for _, b in pts], marker="o", label=f"p{p:g}")
        ax.set_xlabel("spacing (ft)")
        ax.set_ylabel("max devices")
        if by_p:
            ax.legend()
    else:
        xs = [r[0] for r in rows]
        ys = [r[1] for r in rows]
        ax.step(xs, ys, where="post")
        ax.set_xlabel(CSV_COLUMNS[kind][0])
        ax.set_ylabel("CDF")
        ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_plots(results: dict, outdir: Union[str, os.PathLike], svg: bool = True) -> List[str]:
    """Write CSV (and SVG) datasets for whichever results are given.

    ``results`` may hold ``bandwidth`` (BandwidthSeries or samples),
    ``capacity`` (list of ``(spacing_ft, CapacityResult)``) and ``delivery``
    (DeliveryStats). Missing entries produce header-only CSVs.
    """
    outdir = os.fspath(outdir)
    os.makedirs(outdir, exist_ok=True)
    bw = results.get("bandwidth")
    if isinstance(bw, BandwidthSeries):
        bw = bw.samples()
    rows = {
        "bandwidth_cdf": _cdf_points(bw if bw is not None else []),
        "capacity": sorted((float(s), float(c.percentile), int(c.max_devices))
                           for s, c in results.get("capacity", ())),
        "delivery_cdf": (results["delivery"].cdf() if results.get("delivery") else []),
    }
    written = []
    for kind, data in rows.items():
        path = os.path.join(outdir, f"{kind}.csv")
        _write_csv(path, CSV_COLUMNS[kind], data)
        written.append(path)
        if svg:
            spath = os.path.join(outdir, f"{kind}.svg")
            _write_svg(spath, kind, data)
            written.append(spath)
    return written
