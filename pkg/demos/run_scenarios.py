"""Run every packaged closed-loop scenario and print its report.

Each run writes a trace; the report is recomputed from the trace alone to
show it carries everything needed.  Pass a directory to keep the traces.

    python demos/run_scenarios.py [out_dir]
"""

import sys
import tempfile
import time
from pathlib import Path

from compliantkit.config import load_config
from compliantkit.sim import load_scenario, metrics_report, run_scenario
from compliantkit.stream_sync import read_log, write_log

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
out.mkdir(parents=True, exist_ok=True)
cfg = load_config()
for name in sorted(cfg.scenarios):
    t0 = time.perf_counter()
    run = run_scenario(load_scenario(name, cfg), cfg)
    path = out / f"{name}.log"
    write_log(run.trace, path)
    again = metrics_report(read_log(path))
    print(run.report.text())
    print(f"  ({time.perf_counter() - t0:.1f}s, trace {path}, "
          f"report from file matches: {again.digest() == run.report.digest()})\n")
