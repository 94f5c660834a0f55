"""
Layer plan and cost of the two-branch network
=============================================

Walks through the paper-scale preset: stage output sizes for both branches,
parameter and FLOP totals, and how they move when the stem is unshared or
the stripe count changes.
"""

import numpy as np

from jlml import model as M

cfg = M.paper_config()

# output size of every stage, global branch then local (per stripe)
for row in M.stage_output_sizes(cfg):
    print(f"{row.layer:<8} G {row.global_size}  L {row.local_size}")

# depth counts the stem, 12 bottlenecks of 3 convs, and the feature layer
print("depth", M.depth(cfg), "streams", M.stream_count(cfg))
print(f"params {M.count_params(cfg) / 1e6:.2f}M (+{M.count_head_params(cfg) / 1e6:.2f}M in heads)")
print(f"FLOPs  {M.count_flops(cfg) / 1e9:.2f}G")

# an unshared stem only duplicates the first conv, so the extra cost is tiny
extra = M.count_params(cfg.replace(share_stem=False)) - M.count_params(cfg)
print("unshared stem adds", extra, "parameters")

# each stripe has its own local stream, so parameters grow with m
for m in (1, 2, 4, 8):
    c = cfg.replace(m=m)
    print(f"m={m}: {M.count_params(c) / 1e6:.2f}M params, {M.count_flops(c) / 1e9:.2f}G FLOPs")

# the counts agree with an instantiated model
toy = M.toy_config()
net = M.build(toy, seed=0)
print("toy preset:", net.num_params(), "==", M.count_params(toy, include_heads=True))

# one forward pass on random images
out = M.forward(net, np.random.default_rng(0).random((2, 3, 64, 64)))
print("global feature", out.global_feature.shape, "local feature", out.local_feature.shape)
