"""How much should a client trust its neighbors?

Sweeps the ensemble weight lambda: at 0 every client is on its own (ISGD
behavior); as lambda grows the neighbor-seed ensemble contributes more and
accuracy on the non-IID task climbs, because neighbors cover the class each
client never sees locally.
"""

from hdus.harness import ExperimentConfig, sweep

cfg = ExperimentConfig(framework="hdus", rounds=12, repeats=2,
                       blob_samples_per_class=200)
grid = sweep(cfg, "lambda", [0.0, 0.2, 0.4, 0.6, 0.8])

print("lambda   accuracy (mean +- std over repeats)")
for lam, report in grid.items():
    print(f"{lam:5.1f}    {report.mean():.4f} +- {report.std():.4f}")
