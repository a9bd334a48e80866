# Walking a shifted stream
#
# Batches carry features and ids only; labels sit in the oracle. The
# selection rule sends the least certain samples to a human and the most
# certain ones to the pretrained model for pseudo-labels.

import numpy as np

from cpatta.classifier import fit, forward, init_params
from cpatta.conformal import nonconformity_batch, weighted_threshold
from cpatta.selection import AnnotationBuffers, SelectionConfig, ShiftDetectorState, allocate, annotate, detect_shift
from cpatta.stream import DomainSpec, SourceTask, StreamSchedule, SyntheticStream, default_schedule, generate_source

task = SourceTask()
train, cal, _ = generate_source(task, seed=1)
phi = fit(init_params("linear", 16, 7), train.features, train.labels)
tau = weighted_threshold(nonconformity_batch(forward(phi, cal.features), cal.labels), 1.0, 0.2)

stream = SyntheticStream(default_schedule(num_domains=4, batches_per_domain=10, seed=1), task)
cfg = SelectionConfig(n_human=3, n_human_shift=6, n_model=3, budget_total=60)
buffers = AnnotationBuffers(budget_total=60)
detector = ShiftDetectorState()

for batch in stream:
    probs = forward(phi, batch.features)
    shift, detector = detect_shift(detector, 1 - probs.max(axis=1))
    human, model = allocate(probs, probs, tau, tau, cfg, shift, buffers.budget_remaining)
    annotate(batch, human, model, stream.oracle, phi, buffers, probs.argmax(1))
    if shift or batch.index % 5 == 0:
        print(f"batch {batch.index:2d} domain {batch.domain_id} shift={shift} humans={batch.sample_ids[human].tolist()}")

print("budget used", buffers.budget_used, "of", buffers.budget_total)
print("human buffer", len(buffers.buf_h), "model buffer", len(buffers.buf_m))

# The oracle counted every human query and nothing else.

print("oracle queries", stream.oracle.queries)
truth = stream.oracle.reveal_for_evaluation([e.sample_id for e in buffers.log_m])
print("pseudo-label accuracy", np.mean([e.label for e in buffers.log_m] == truth))

# The graded schedule above barely moves the pretrained model's confidence,
# so the detector stays quiet. An abrupt change does register: a quarter
# turn drops two antipodal clusters onto the decision boundary.

task2 = SourceTask(num_classes=2, feature_dim=2, class_means=np.array([[3.0, 0.0], [-3.0, 0.0]]), class_cov_scale=0.5)
train2, _, _ = generate_source(task2, seed=0)
phi2 = fit(init_params("linear", 2, 2), train2.features, train2.labels)
sched = StreamSchedule(((DomainSpec(0, noise_scale=0.5), 12), (DomainSpec(1, rotation=np.pi / 2, noise_scale=0.5), 4)), seed=3)
detector = ShiftDetectorState()
for batch in SyntheticStream(sched, task2):
    m = 1 - forward(phi2, batch.features).max(axis=1)
    shift, detector = detect_shift(detector, m)
    print(f"batch {batch.index:2d} domain {batch.domain_id} mean score {m.mean():.3f} shift={shift}")
