# How the calibration weight reacts to pseudo coverage
#
# The accumulator integrates the coverage error and the weight integrates
# the accumulator, so a persistent error moves log w quadratically.

import numpy as np

from cpatta.conformal import weighted_threshold
from cpatta.weighting import WeightState, pseudo_coverage, update_weight

alpha = 0.1
print(pseudo_coverage([0, 1, 2, 0], [{0}, {1, 2}, {0}, {0, 1}]))

# Under-coverage: w falls and the threshold rises.

rng = np.random.default_rng(0)
cal_scores = rng.beta(2, 5, 200)
s = WeightState(alpha)
for pc in [0.85] * 8:
    s = update_weight(s, pc)
    tau = weighted_threshold(cal_scores, s.w, alpha).tau
    print(f"step {s.step}: t_acc={s.t_acc:.4f} w={s.w:.4f} tau={tau:.4f}")

# Then over-coverage: the accumulator has to unwind before w turns around.

for pc in [0.97] * 12:
    s = update_weight(s, pc)
    print(f"step {s.step}: t_acc={s.t_acc:.4f} w={s.w:.4g}")

# History keeps every step for plotting.

steps, pcs, ws, ts = zip(*s.history)
print(len(steps), "steps recorded; min w", min(ws), "max w", max(ws))
