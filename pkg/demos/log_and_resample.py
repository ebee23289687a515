"""Record a multi-rate session, read it back, align it on one clock.

Three sensors tick at different rates with their own clock offsets.  The
log is written, read back bit for bit, then resampled onto a 60 Hz grid the
way a policy would consume it.

    python demos/log_and_resample.py
"""

import tempfile
from pathlib import Path

import numpy as np

from compliantkit.stream_sync import (SessionLog, align_resample, describe,
                                      log_to_bytes, read_log, write_log)

rng = np.random.default_rng(0)
log = SessionLog("bench", 0, {"rig": "desk"})
for name, rate, arity, offset in (("wrench", 360.0, 6, 0), ("tcp", 500.0, 3, 1_500_000),
                                  ("gripper", 30.0, 2, -4_000_000)):
    log.add_stream(name, rate, arity, offset)
    t = np.arange(int(2 * rate)) * (1e9 / rate) + rng.normal(0, 2e4, int(2 * rate))
    t = np.sort(np.round(t - t.min())).astype(np.uint64)
    phase = 2 * np.pi * 1.5 * t * 1e-9
    log.extend(name, t, np.sin(phase)[:, None] * np.arange(1, arity + 1))

path = Path(tempfile.mkdtemp()) / "bench.log"
write_log(log, path)
back = read_log(path)
print(describe(back))
print("identical after round trip:", back.identical(log), log_to_bytes(back) == path.read_bytes())

table = align_resample(back, ["wrench", "tcp", "gripper"], 60.0)
print(f"aligned grid: {len(table.times_ns)} rows from {table.times_ns[0] * 1e-9:.4f}s "
      f"to {table.times_ns[-1] * 1e-9:.4f}s")
for name, v in table.values.items():
    print(f"  {name:<8} first row {np.round(v[0], 3)}")
