"""Train a small model on sphere flow, evaluate on held-out samples, dump fields.

About five minutes on one CPU core.  Pass a smaller epoch count as the
first argument for a quicker look.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from mno.cli import dump_fields
from mno.datagen import GenSpec, gen_sphere_flow
from mno.model import MnoConfig, init_model
from mno.training import SPHERE_FLOW_FIELDS, TrainConfig, evaluate, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30
train_set = [gen_sphere_flow(GenSpec(n=2048, seed=i)) for i in range(64)]
test_set = [gen_sphere_flow(GenSpec(n=2048, seed=1000 + i)) for i in range(16)]

cfg = MnoConfig(in_features=4, out_features=4, blocks=2, dim=32, modes=32, heads=4, k=8)
model = init_model(cfg, seed=0)


def progress(step, loss):
    if step % 80 == 0:
        print(f"step {step:4d}  loss {loss:.4f}")


res = train(model, train_set,
            TrainConfig(epochs=epochs, batch_size=4, max_lr=3e-3, fields="sphere-flow", val_fraction=0),
            step_callback=progress)
print(f"{res.steps} steps in {res.wall_time:.0f}s")

report = evaluate(model, test_set, SPHERE_FLOW_FIELDS)
for name, r, m in report.rows:
    print(f"{name:9s} RL2 {r:.4f}  MAE {m:.4f}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "fields.csv"
    dump_fields(model, test_set[0], path)
    table = np.loadtxt(path, delimiter=",", skiprows=1)
    print("dumped", table.shape[0], "rows; worst velocity error", table[:, 11:14].max().round(4))
