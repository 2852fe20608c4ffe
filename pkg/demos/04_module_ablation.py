"""Which attention scales matter: a quick module-mask sweep on sphere flow.

A short budget (a few epochs, small data) so the whole table prints in a
few minutes; the acceptance suite runs the full-length version.
"""
import sys
import tempfile
from pathlib import Path

from mno.datagen import GenSpec, gen_sphere_flow
from mno.model import TABLE3_MASKS, MnoConfig
from mno.training import TrainConfig, ablate

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 6
train_set = [gen_sphere_flow(GenSpec(n=1024, seed=i)) for i in range(16)]
test_set = [gen_sphere_flow(GenSpec(n=1024, seed=1000 + i)) for i in range(4)]

base = MnoConfig(in_features=4, out_features=4, blocks=2, dim=32, modes=16, heads=4, k=8)
cfg = TrainConfig(epochs=epochs, batch_size=4, max_lr=3e-3, fields="sphere-flow")
result = ablate(base, cfg, train_set, TABLE3_MASKS, test=test_set)

print(f"{'modules':20s} {'RL2 v':>8s} {'RL2 p':>8s}")
for mask in result.masks():
    print(f"{mask.label:20s} {result.median(mask, 'velocity'):8.4f} {result.median(mask, 'pressure'):8.4f}")

with tempfile.TemporaryDirectory() as tmp:
    result.to_csv(Path(tmp) / "ablation.csv")
    print((Path(tmp) / "ablation.csv").read_text())
