"""Multi-rate session logs: recording, a binary file format, and resampling.

File layout
-----------
A UTF-8 text header, one item per line::

    CKLOG <version>
    session_id <id>
    epoch_ns <int>
    meta <json object>
    stream <id> <name> <rate_hz> <arity> <offset_ns> <col,col,...|->
    ...
    end_header

followed by length-prefixed little-endian records::

    u32 body_len | u16 stream_id | u64 t_ns | f64 x arity | u32 crc32(body)

``body_len`` counts the stream id, timestamp and payload bytes.  A record
whose length, stream id or checksum does not validate ends the readable
part of the file; everything before it is recovered.

Timestamps are nanoseconds since the session epoch as recorded by the
producing device.  Each stream carries a constant clock offset that is added
when streams are aligned, never when the log is stored or read back.
"""

from __future__ import annotations

import csv
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAGIC = "CKLOG"
_PREFIX = struct.Struct("<IH")


class LogFormatError(ValueError):
    pass


class TruncatedLogError(LogFormatError):
    """Raised by strict reads; ``recovered`` holds every valid record."""

    def __init__(self, msg, recovered: "SessionLog", offset: int, last_valid):
        super().__init__(msg)
        self.recovered = recovered
        self.offset = offset
        self.last_valid = last_valid


@dataclass(frozen=True)
class StreamSpec:
    name: str
    rate: float
    arity: int
    offset_ns: int = 0
    columns: tuple = ()

    def __post_init__(self):
        if not self.name or any(c.isspace() for c in self.name):
            raise ValueError(f"bad stream name {self.name!r}")
        if not self.rate > 0:
            raise ValueError("stream rate must be positive")
        if self.arity < 1:
            raise ValueError("payload arity must be >= 1")
        if self.columns and len(self.columns) != self.arity:
            raise ValueError("column names must match arity")


class _Series:
    """Append-only growable buffers (amortised O(1) append)."""

    def __init__(self, arity, capacity=64):
        self.n = 0
        self.t = np.empty(capacity, dtype=np.uint64)
        self.x = np.empty((capacity, arity), dtype=np.float64)

    def _grow(self, need):
        cap = max(need, 2 * len(self.t))
        t = np.empty(cap, dtype=np.uint64)
        x = np.empty((cap, self.x.shape[1]), dtype=np.float64)
        t[:self.n] = self.t[:self.n]
        x[:self.n] = self.x[:self.n]
        self.t, self.x = t, x

    def append(self, t, payload):
        if self.n == len(self.t):
            self._grow(self.n + 1)
        self.t[self.n] = t
        self.x[self.n] = payload
        self.n += 1

    def extend(self, t, x):
        m = len(t)
        if self.n + m > len(self.t):
            self._grow(self.n + m)
        self.t[self.n:self.n + m] = t
        self.x[self.n:self.n + m] = x
        self.n += m

    @property
    def last(self):
        return int(self.t[self.n - 1]) if self.n else None


class SessionLog:
    def __init__(self, session_id: str = "session", epoch_ns: int = 0,
                 meta: dict | None = None):
        if not session_id or any(c.isspace() for c in session_id):
            raise ValueError("session id must be a non-empty token")
        self.session_id = session_id
        self.epoch_ns = int(epoch_ns)
        self.meta = dict(meta or {})
        self.streams: dict[str, StreamSpec] = {}
        self._data: dict[str, _Series] = {}

    def add_stream(self, name, rate, arity, offset_ns=0, columns=()) -> StreamSpec:
        if name in self.streams:
            raise ValueError(f"stream {name!r} already registered")
        if len(self.streams) >= 0xFFFF:
            raise ValueError("too many streams")
        spec = StreamSpec(name, float(rate), int(arity), int(offset_ns), tuple(columns))
        self.streams[name] = spec
        self._data[name] = _Series(spec.arity)
        return spec

    def append(self, stream: str, t_ns: int, payload) -> "SessionLog":
        try:
            spec = self.streams[stream]
        except KeyError:
            raise KeyError(f"unknown stream {stream!r}") from None
        t_ns = int(t_ns)
        if t_ns < 0 or t_ns >= 2**64:
            raise ValueError("timestamp outside u64 range")
        payload = np.asarray(payload, dtype=np.float64).reshape(-1)
        if payload.size != spec.arity:
            raise ValueError(f"stream {stream!r} expects {spec.arity} values, "
                             f"got {payload.size}")
        series = self._data[stream]
        last = series.last
        if last is not None and t_ns <= last:
            raise ValueError(f"timestamp {t_ns} not after {last} on {stream!r}")
        series.append(t_ns, payload)
        return self

    def extend(self, stream: str, t_ns, payload) -> "SessionLog":
        """Bulk append; same checks as :meth:`append`."""
        spec = self.streams[stream]
        t = np.asarray(t_ns, dtype=np.uint64).reshape(-1)
        x = np.asarray(payload, dtype=np.float64).reshape(len(t), spec.arity)
        series = self._data[stream]
        if len(t) == 0:
            return self
        if np.any(t[1:] <= t[:-1]) or (series.last is not None and int(t[0]) <= series.last):
            raise ValueError(f"timestamps not strictly increasing on {stream!r}")
        series.extend(t, x)
        return self

    def times(self, stream: str) -> np.ndarray:
        s = self._data[stream]
        return s.t[:s.n]

    def values(self, stream: str) -> np.ndarray:
        s = self._data[stream]
        return s.x[:s.n]

    def corrected_times(self, stream: str) -> np.ndarray:
        """Float ns timestamps with the stream's clock offset applied."""
        return self.times(stream).astype(np.float64) + self.streams[stream].offset_ns

    def __len__(self):
        return sum(s.n for s in self._data.values())

    def count(self, stream: str) -> int:
        return self._data[stream].n

    def column(self, stream: str, name: str) -> np.ndarray:
        return self.values(stream)[:, self.streams[stream].columns.index(name)]

    def identical(self, other: "SessionLog") -> bool:
        """Header and every sample equal, payloads compared bitwise."""
        if (self.session_id, self.epoch_ns, self.meta, self.streams) != \
                (other.session_id, other.epoch_ns, other.meta, other.streams):
            return False
        for name in self.streams:
            if not np.array_equal(self.times(name), other.times(name)):
                return False
            if self.values(name).tobytes() != other.values(name).tobytes():
                return False
        return True


append_sample = SessionLog.append


# --------------------------------------------------------------------------
# file format

def _record_dtype(arity):
    return np.dtype([("len", "<u4"), ("sid", "<u2"), ("t", "<u8"),
                     ("x", "<f8", (arity,)), ("crc", "<u4")])


def _header_text(log: SessionLog) -> str:
    lines = [f"{MAGIC} {FORMAT_VERSION}",
             f"session_id {log.session_id}",
             f"epoch_ns {log.epoch_ns}",
             "meta " + json.dumps(log.meta, sort_keys=True)]
    for sid, spec in enumerate(log.streams.values()):
        cols = ",".join(spec.columns) if spec.columns else "-"
        lines.append(f"stream {sid} {spec.name} {spec.rate!r} {spec.arity} "
                     f"{spec.offset_ns} {cols}")
    lines.append("end_header")
    return "\n".join(lines) + "\n"


def _encode_records(sid, arity, t, x) -> bytes:
    dt = _record_dtype(arity)
    rec = np.empty(len(t), dtype=dt)
    rec["len"] = 2 + 8 + 8 * arity
    rec["sid"] = sid
    rec["t"] = t
    rec["x"] = x
    size = dt.itemsize
    raw = rec.view(np.uint8).reshape(len(t), size)
    crc = [zlib.crc32(row) for row in raw[:, 4:size - 4]]
    rec["crc"] = np.asarray(crc, dtype=np.uint32)
    return rec.tobytes()


def _iter_chunks(log: SessionLog):
    yield _header_text(log).encode("utf-8")
    for sid, name in enumerate(log.streams):
        spec = log.streams[name]
        t, x = log.times(name), log.values(name)
        chunk = 1 << 16
        for i in range(0, len(t), chunk):
            yield _encode_records(sid, spec.arity, t[i:i + chunk], x[i:i + chunk])


def log_to_bytes(log: SessionLog) -> bytes:
    """The exact bytes :func:`write_log` would produce."""
    return b"".join(_iter_chunks(log))


def write_log(log: SessionLog, path) -> None:
    """Write the whole log; records are grouped per stream in time order."""
    with open(path, "wb") as fh:
        for part in _iter_chunks(log):
            fh.write(part)


class LogWriter:
    """Incremental writer: every appended sample is framed and flushed.

    A crash leaves a file whose complete records are all recoverable.
    """

    def __init__(self, path, log: SessionLog):
        self.log = log
        self._sid = {name: i for i, name in enumerate(log.streams)}
        self._fh = open(path, "wb")
        self._fh.write(_header_text(log).encode("utf-8"))
        self._fh.flush()

    def append(self, stream, t_ns, payload):
        self.log.append(stream, t_ns, payload)
        spec = self.log.streams[stream]
        x = np.asarray(payload, dtype=np.float64).reshape(1, spec.arity)
        self._fh.write(_encode_records(self._sid[stream], spec.arity,
                                       np.array([t_ns], dtype=np.uint64), x))
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _parse_header(buf: bytes):
    end = buf.find(b"end_header\n")
    if end < 0:
        raise LogFormatError("missing end_header")
    lines = buf[:end].decode("utf-8").splitlines()
    if not lines or not lines[0].startswith(MAGIC + " "):
        raise LogFormatError("not a session log")
    version = int(lines[0].split()[1])
    if version != FORMAT_VERSION:
        raise LogFormatError(f"unsupported log version {version}")
    log = None
    fields = {}
    streams = []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "stream":
            sid, name, rate, arity, offset, cols = rest.split(" ")
            streams.append((int(sid), name, float(rate), int(arity), int(offset),
                            () if cols == "-" else tuple(cols.split(","))))
        else:
            fields[key] = rest
    log = SessionLog(fields["session_id"], int(fields["epoch_ns"]),
                     json.loads(fields.get("meta", "{}")))
    for i, (sid, name, rate, arity, offset, cols) in enumerate(streams):
        if sid != i:
            raise LogFormatError("stream ids must be dense and ordered")
        log.add_stream(name, rate, arity, offset, cols)
    return log, end + len(b"end_header\n")


def read_log(path, strict: bool = True) -> SessionLog:
    """Read a log file.

    On a truncated or corrupted tail, ``strict`` raises
    :class:`TruncatedLogError` (carrying the recovered log); otherwise the
    recovered log is returned with ``log.meta`` untouched and the attribute
    ``log.damaged_at`` set to the byte offset of the first bad record.
    """
    buf = Path(path).read_bytes()
    log, pos = _parse_header(buf)
    specs = list(log.streams.values())
    dtypes = [_record_dtype(s.arity) for s in specs]
    total = len(buf)
    last_valid = None
    bad = None
    while pos < total:
        if total - pos < _PREFIX.size:
            bad = "truncated record prefix"
            break
        blen, sid = _PREFIX.unpack_from(buf, pos)
        if sid >= len(specs) or blen != 10 + 8 * specs[sid].arity:
            bad = "bad record framing"
            break
        dt = dtypes[sid]
        size = dt.itemsize
        # bulk-parse a run of records from the same stream
        chunk = 16
        run_total = 0
        stop = False
        while not stop:
            avail = (total - pos) // size
            n = min(chunk, avail)
            if n == 0:
                if pos < total:
                    bad = "truncated record"
                break
            rec = np.frombuffer(buf, dtype=dt, count=n, offset=pos)
            ok = (rec["sid"] == sid) & (rec["len"] == blen)
            m = n if ok.all() else int(np.argmin(ok))
            raw = np.frombuffer(buf, dtype=np.uint8, count=m * size, offset=pos)
            raw = raw.reshape(m, size)
            good = m
            for i in range(m):
                if zlib.crc32(raw[i, 4:size - 4]) != rec["crc"][i]:
                    good = i
                    break
            series_last = log._data[specs[sid].name].last
            t = rec["t"][:good]
            if good:
                mono = np.concatenate([[True] if series_last is None
                                       else [int(t[0]) > series_last],
                                       t[1:] > t[:-1]])
                if not mono.all():
                    good = int(np.argmin(mono))
                    t = t[:good]
            if good:
                log.extend(specs[sid].name, t, rec["x"][:good])
                last_valid = (specs[sid].name, int(t[-1]))
            pos += good * size
            run_total += good
            if good < m:
                bad = "checksum or ordering failure"
                stop = True
            elif m < n or n < chunk:
                stop = True
            else:
                chunk = min(chunk * 2, 1 << 16)
        if bad:
            break
    if bad:
        if strict:
            raise TruncatedLogError(f"{bad} at byte {pos}; last valid record "
                                    f"{last_valid}", log, pos, last_valid)
        log.damaged_at = pos
    return log


# --------------------------------------------------------------------------
# alignment

@dataclass
class AlignedTable:
    times_ns: np.ndarray
    values: dict = field(default_factory=dict)
    present: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times_ns)


def align_resample(log: SessionLog, streams, target_rate: float,
                   method: str = "linear", span: str = "overlap") -> AlignedTable:
    """Resample ``streams`` onto one uniform timeline.

    ``span="overlap"`` covers the interval where every stream has data;
    ``span="union"`` covers all of them and marks rows outside a stream's
    own span absent (NaN, ``present`` False).
    """
    if method not in ("linear", "zoh"):
        raise ValueError("method must be 'linear' or 'zoh'")
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    streams = list(streams)
    src = {}
    for name in streams:
        if log.count(name) == 0:
            raise ValueError(f"stream {name!r} is empty")
        src[name] = (log.corrected_times(name), log.values(name))
    starts = [t[0] for t, _ in src.values()]
    ends = [t[-1] for t, _ in src.values()]
    if span == "overlap":
        t0, t1 = max(starts), min(ends)
        if t1 < t0:
            raise ValueError("streams do not overlap in time")
    elif span == "union":
        t0, t1 = min(starts), max(ends)
    else:
        raise ValueError("span must be 'overlap' or 'union'")
    period = 1e9 / target_rate
    # timestamps are whole nanoseconds, so allow half a nanosecond of slack
    n = int(np.floor((t1 - t0 + 0.5) / period)) + 1
    grid = t0 + np.arange(n) * period
    out = AlignedTable(grid)
    for name, (t, x) in src.items():
        inside = (grid >= t[0] - 0.5) & (grid <= t[-1] + 0.5)
        if method == "linear":
            vals = np.column_stack([np.interp(grid, t, x[:, j]) for j in range(x.shape[1])])
        else:
            idx = np.searchsorted(t, grid + 0.5, side="right") - 1
            vals = x[np.clip(idx, 0, len(t) - 1)].copy()
        vals[~inside] = np.nan
        out.values[name] = vals
        out.present[name] = inside
    return out


def wrench_window(log: SessionLog, stream: str, t_end_ns: float, rate: float,
                  length: int = 32, frame: str | None = None):
    """Policy observation window: ``length`` zero-order-hold samples of a
    6-D wrench stream at ``rate`` ending at ``t_end_ns``.

    Samples before the stream's first record are omitted.
    """
    from .geometry import Wrench
    from .policy_io import WrenchWindow

    t = log.corrected_times(stream)
    x = log.values(stream)
    win = WrenchWindow(length)
    period = 1e9 / rate
    for k in range(length - 1, -1, -1):
        tk = t_end_ns - k * period
        i = int(np.searchsorted(t, tk + 0.5, side="right")) - 1
        if i < 0:
            continue
        win.push(Wrench.from_vector(x[i], frame or stream), tk * 1e-9)
    return win


def export_csv(log: SessionLog, stream: str, path) -> None:
    spec = log.streams[stream]
    cols = spec.columns or tuple(f"v{i}" for i in range(spec.arity))
    t = log.times(stream)
    x = log.values(stream)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t_ns",) + cols)
        for ti, row in zip(t, x):
            w.writerow([int(ti)] + [repr(float(v)) for v in row])


def describe(log: SessionLog) -> str:
    lines = [f"session {log.session_id}  epoch_ns={log.epoch_ns}  "
             f"records={len(log)}"]
    for name, spec in log.streams.items():
        n = log.count(name)
        if n:
            t = log.times(name)
            dur = (int(t[-1]) - int(t[0])) * 1e-9
            span = f"{int(t[0]) * 1e-9:.3f}s..{int(t[-1]) * 1e-9:.3f}s"
            eff = (n - 1) / dur if dur > 0 else float("nan")
            lines.append(f"  {name:<12} {spec.rate:>8.2f} Hz  arity={spec.arity:<3} "
                         f"n={n:<8} {span}  measured {eff:.2f} Hz  "
                         f"offset={spec.offset_ns} ns")
        else:
            lines.append(f"  {name:<12} {spec.rate:>8.2f} Hz  arity={spec.arity:<3} n=0")
    for key, value in sorted(log.meta.items()):
        lines.append(f"  meta {key} = {value}")
    return "\n".join(lines)
