"""
Folding a multi-branch FMEN into a plain conv stack
===================================================

Train form: every 3x3 conv is an RRRB (1x1 expand, 3x3, 1x1 reduce plus two
identity skips) and each attention block carries batch norms. Deploy form:
one 3x3 conv per RRRB, no BN. The two compute the same function.
"""
import numpy as np

from fmen import FmenConfig, build_fmen, check_equivalence, count_ops, fuse_network, he_init, param_count

# a small x2 model so the demo runs in a couple of seconds
cfg = FmenConfig(scale=2, trunk_channels=16, hfab_channels=8, n_pairs=2)
train_form = he_init(build_fmen(cfg, lr_hw=(32, 32)), seed=0).astype(np.float64)
deploy = fuse_network(train_form)

for name, g in (("train", train_form), ("deploy", deploy)):
    ops = count_ops(g)
    print(f"{name:>6}: {len(g):3d} nodes, {ops.total_convs:2d} convs, {param_count(g):6d} params, "
          f"{ops.conv_macs / 1e6:.1f}M MACs")

# same seeded inputs through both graphs
rep = check_equivalence(train_form, deploy, n_trials=5, tol=1e-9)
print(rep)

# the fused kernels are ordinary 3x3 convs; nothing branches any more
print(sorted({n.kind for n in deploy.nodes}))
