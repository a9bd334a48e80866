# End-to-end runs: certainty-based selection against random picks
#
# Same seeds, same stream; only the selection rule differs.

import tempfile
from pathlib import Path

import numpy as np

from cpatta import RunConfig, emit, run
from cpatta.harness import format_efficiency, read_records

rows = []
for selection in ("cp", "random"):
    for seed in range(3):
        _, s = run(RunConfig(selection=selection), seed)
        rows.append((selection, seed, s.realtime_accuracy, s.post_adaptation_accuracy, s.eff_h, s.eff_m))
        print(f"{selection:6s} seed {seed}: rt {s.realtime_accuracy:.3f} post {s.post_adaptation_accuracy:.3f} "
              f"Eff_H {format_efficiency(s.eff_h)} Eff_M {format_efficiency(s.eff_m)}")

for selection in ("cp", "random"):
    eff = [r[4] for r in rows if r[0] == selection]
    print(selection, "mean Eff_H", np.mean(eff))

# Per-batch records go to JSONL or CSV; the summary to JSON.

records, summary = run(RunConfig(weighting="uniform", num_domains=2, batches_per_domain=5))
out = Path(tempfile.mkdtemp())
rec_path, sum_path = emit(records, summary, out, "csv")
print(rec_path.read_text().splitlines()[0])
print(len(read_records(rec_path)), "records read back from", rec_path)
