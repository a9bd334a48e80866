# Conformal sets on a toy source task
#
# Train a softmax model on Gaussian clusters, calibrate on held-out points
# and look at the sets, soft scores and certainty it produces.

import numpy as np

from cpatta.classifier import fit, forward, init_params
from cpatta.conformal import (
    SmoothedScoreConfig,
    cert_topk_batch,
    nonconformity_batch,
    prediction_set,
    prediction_set_mask,
    weighted_threshold,
)
from cpatta.stream import SourceTask, generate_source

task = SourceTask(num_classes=7, feature_dim=16)
train, cal, test = generate_source(task, seed=0)
params = fit(init_params("linear", 16, 7), train.features, train.labels)
print("calibration points:", len(cal))

# Scores are 1 - p(true label). The threshold is a quantile of these.

scores = nonconformity_batch(forward(params, cal.features), cal.labels)
for alpha in (0.05, 0.1, 0.2):
    tau = weighted_threshold(scores, 1.0, alpha)
    print(f"alpha={alpha}: tau={tau.tau:.4f}")

# Test coverage should sit just above 1 - alpha.

probs = forward(params, test.features)
tau = weighted_threshold(scores, 1.0, 0.1)
mask = prediction_set_mask(probs, tau)
print("coverage", mask[np.arange(len(test)), test.labels].mean(), "mean set size", mask.sum(1).mean())

# Shrinking the weight moves mass onto the test point and widens the sets.

for w in (4.0, 1.0, 0.5, 0.1):
    t = weighted_threshold(scores, w, 0.1)
    print(f"w={w}: tau={t.tau}, set for first test point {sorted(prediction_set(probs[0], t))}")

# Certainty: the mean of the top-K soft inclusion scores. Low values go to a human.

cert = cert_topk_batch(probs[:8], tau, SmoothedScoreConfig(temperature=0.1, k=1))
print(np.round(cert, 3))
print("least certain of the first 8:", int(np.argmin(cert)))
