"""How well does a tiny seed model mimic its main model?

Trains one main model on a blob task, then incubates seed models of three
sizes against it and reports how faithfully each reproduces the teacher on
the unlabeled reference set, checkpoint by checkpoint.
"""

import numpy as np

from hdus import (DistillConfig, MlpSpec, ReferenceSet, distill_fidelity,
                  gen_blobs, incubate_seed, init_mlp, sgd_train)

rng = np.random.default_rng(0)
data = gen_blobs(200, 5, 8, 0.5, rng)
ref = ReferenceSet(data.features[800:])

main = init_mlp(MlpSpec((8, 64, 5)), np.random.default_rng(1))
sgd_train(main, data.features[:800], data.labels[:800], 5,
          epochs=25, lr=0.1, batch_size=32, rng=np.random.default_rng(2))
print(f"teacher: {main.spec.layer_dims}, {main.spec.param_count()} params\n")

cfg = DistillConfig(temperature=3.0, epochs=5, lr=0.1)
for hidden in (4, 8, 16):
    spec = MlpSpec((8, hidden, 5))
    seed = None
    print(f"seed {spec.layer_dims} ({spec.param_count()} params):")
    for checkpoint in range(1, 5):
        # warm-started: each pass refines the previous checkpoint
        seed = incubate_seed(main, spec, ref, cfg, np.random.default_rng(3),
                             init=seed)
        kl, agree = distill_fidelity(seed, main, ref, cfg.temperature)
        print(f"  after {checkpoint * cfg.epochs:2d} epochs: "
              f"mean KL to teacher {kl:.4f}, argmax agreement {agree:.3f}")
    print()
