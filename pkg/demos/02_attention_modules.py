"""The three attention scales on a small cloud, and what each one normalizes."""
import numpy as np

from mno.autograd import no_grad
from mno.datagen import GenSpec, gen_sphere_flow
from mno.geometry import knn_graph
from mno.model import (
    MnoConfig,
    encode,
    forward,
    global_attention,
    init_model,
    local_attention,
    micro_attention,
)

cfg = MnoConfig(in_features=4, out_features=4, blocks=2, dim=32, modes=8, heads=4, k=8)
model = init_model(cfg, seed=0)
print("parameters:", model.num_parameters())

s = gen_sphere_flow(GenSpec(n=256, seed=1))
graph = knn_graph(s.positions, cfg.k)
print("k-NN table", graph.indices.shape, " first row:", graph.indices[0])

with no_grad():
    x = encode(s.positions, s.features, model)
    block = model.block(0)

    # global: N points pooled into M modes and scattered back
    g_out, maps = global_attention(x, block.scope("global"), cfg.heads, return_maps=True)
    print("P", maps["P"].shape, "column sums", maps["P"].sum(axis=0)[:4])
    print("Q", maps["Q"].shape, "row sums", maps["Q"].sum(axis=1)[:4])

    # local: per-channel weights over each point's neighbours
    l_out = local_attention(x, graph, block.scope("local"))
    print("local output", l_out.shape)

    # micro: one softmax score per point, summing to 1 over the sample
    m_out, score = micro_attention(x, block.scope("micro"), return_scores=True)
    print("micro scores sum:", score.sum(), " largest:", score.max())

    # relabeling the points relabels the prediction
    perm = np.random.default_rng(0).permutation(s.n_points)
    sp = s.permuted(perm)
    a = forward(model, s, graph).data
    b = forward(model, sp, knn_graph(sp.positions, cfg.k)).data
    print("equivariance error:", np.abs(b - a[perm]).max())
