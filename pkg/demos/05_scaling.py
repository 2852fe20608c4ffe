"""Forward time of each module as N doubles, and of the global module as M doubles."""
from mno.bench import bench_modes, bench_points

for module in ("global", "local", "micro"):
    rows = bench_points(module, [1000, 2000, 4000, 8000], dim=64, modes=64, k=8)
    print(module.ljust(7), "  ".join(
        f"N={r.size}: {r.wall_ms:6.2f}ms" + (f" (x{r.ratio:.2f})" if r.ratio else "") for r in rows))

rows = bench_modes([32, 64, 128], n=4000, dim=64, k=8)
print("global ", "  ".join(
    f"M={r.size}: {r.wall_ms:6.2f}ms" + (f" (x{r.ratio:.2f})" if r.ratio else "") for r in rows))
