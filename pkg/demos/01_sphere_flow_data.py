"""Synthetic sphere-flow samples: geometry, closed-form fields, file round trip."""
import tempfile
from pathlib import Path

import numpy as np

from mno.datagen import GenSpec, gen_sphere_flow, pressure_coefficient, sphere_flow_velocity
from mno.io import read_pointset, write_pointset

s = gen_sphere_flow(GenSpec(n=2048, seed=0))
print(s.name, "points:", s.n_points, "features:", s.n_features, "outputs:", s.n_outputs)

# shell points come first, the 256 surface points last (signed distance exactly 0)
surface = s.features[:, 0] == 0
print("surface points:", surface.sum(), " shell radius range:",
      np.linalg.norm(s.positions[~surface], axis=1).min().round(3),
      np.linalg.norm(s.positions[~surface], axis=1).max().round(3))

# no flow through the body: radial velocity vanishes on r = 1
p = s.positions[surface].astype(np.float64)
p /= np.linalg.norm(p, axis=1, keepdims=True)
u = sphere_flow_velocity(p)
print("max |u_r| on the sphere:", np.abs(np.sum(u * p, axis=1)).max())

# stagnation points at x = +-1 have Cp = 1, the equator has Cp = 1 - 9/4
probe = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 0, 1.0]])
print("Cp at front, back, equator:", pressure_coefficient(sphere_flow_velocity(probe)))

# far field: speed approaches the freestream
print("speed at (3,0,0):", np.linalg.norm(sphere_flow_velocity(np.array([[3.0, 0, 0]]))))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "sample.mno"
    write_pointset(s, path)
    back = read_pointset(path)
    print("file bytes:", path.stat().st_size,
          " bit-exact:", back.targets.tobytes() == s.targets.tobytes())
