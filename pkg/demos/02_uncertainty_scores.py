"""Score the same images with all six uncertainty methods.

Trains a small model on a handful of synthetic shapes, then scores a few
clean and corrupted images. Corrupted inputs should generally come out
more uncertain, with the perturb-and-recover score (``resilience``)
separating them most cleanly.

Run:  python demos/02_uncertainty_scores.py   (~2-3 min on CPU)
"""

import numpy as np

from ncauq.data import corrupt, generate_synthetic, split
from ncauq.metrics import dice
from ncauq.nca import predict
from ncauq.training import TrainConfig, train
from ncauq.uncertainty import METHODS, UncertaintyConfig

dataset = split(generate_synthetic(40, (32, 32), seed=1), (0.7, 0.15, 0.15), seed=1)
config = TrainConfig(num_channels=16, hidden_size=32, t_min=12, t_max=24,
                     epochs=8, seed=1, early_stop_val_dice=0.9)
result = train(dataset, config, "/tmp/ncauq_demo_run", progress=print)

uq_cfg = UncertaintyConfig(rollout_steps=24, t_min=12, t_max=24, window=6,
                           stoptime_samples=4, relax_steps=8)
rows = []
for i, sample in enumerate(dataset.subset("test")[:3]):
    noisy = corrupt(sample, "gaussian_noise", severity=4, seed=i)
    occluded = corrupt(sample, "occlusion", severity=4, seed=i)
    for tag, s in (("clean", sample), ("noise-4", noisy), ("occl-4", occluded)):
        _, pred = predict(result.params, s.image, uq_cfg.rollout_steps,
                          np.random.default_rng([9, i]))
        scores = {name: method(result.params, s.image, [i, k], uq_cfg).u
                  for k, (name, method) in enumerate(METHODS.items())}
        rows.append((f"{s.id[:12]}/{tag}", dice(pred.mask, s.mask), scores))

methods = list(METHODS)
print("\nimage/condition        dice  " + "  ".join(f"{m:>10}" for m in methods))
for label, d, scores in rows:
    cells = "  ".join(f"{scores[m]:10.4f}" for m in methods)
    print(f"{label:<21} {d:5.3f}  {cells}")
print("\nhigher u = less trustworthy; compare clean rows against corrupted ones")
