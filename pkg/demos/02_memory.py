"""
Where peak memory comes from
============================

Counting live feature maps, node by node. u is one C x H x W map.
A plain chain never holds more than two; a concat of three branches holds
six at once; the deployed FMEN tops out at four, at each attention gate.
"""
import numpy as np

from fmen import BufferPolicy, FmenConfig, Graph, build_fmen, he_init, plan_memory
from fmen.memory import measure_peak
from fmen.tensor import ConvWeights

C, H, W = 64, 24, 24  # C matches the shipped FMEN width
u = C * H * W
rng = np.random.default_rng(0)


def conv(cin, cout, k=3):
    return ConvWeights(rng.normal(size=(cout, cin, k, k)) * 0.1, np.zeros(cout))


plain = Graph(np.float32)
y = plain.add_input("x", (1, C, H, W))
for i in range(6):
    y = plain.add_node("conv", y, name=f"conv{i}", params=conv(C, C))
    y = plain.add_node("leaky_relu", y, name=f"act{i}")
plain.mark_output(y)

fusion = Graph(np.float32)
x = fusion.add_input("x", (1, C, H, W))
a = fusion.add_node("conv", x, name="conv1", params=conv(C, C))
b = fusion.add_node("conv", a, name="conv2", params=conv(C, C))
cat = fusion.add_node("concat", [x, a, b], name="cat")
fusion.mark_output(fusion.add_node("conv", cat, name="reduce", params=conv(3 * C, C, 1)))

fmen = he_init(build_fmen(FmenConfig(form="deploy"), lr_hw=(H, W)))

for name, g in (("plain chain", plain), ("concat fusion", fusion), ("FMEN deploy", fmen)):
    r = plan_memory(g)
    print(f"{name:>13}: peak {r.peak_elements / u:.2f}u at {r.peak_node_id}  (weights {r.m_net_bytes / 1024:.0f} KiB)")

# the prediction is checked against an allocator that watches a real run
x0 = np.zeros((1, 3, H, W), np.float32)
print("measured FMEN high-water:", measure_peak(fmen, x0).high_water / u, "u")

# the planner also answers "what if": element-wise ops writing in place
r = plan_memory(fmen, policy=BufferPolicy(inplace_elementwise=True))
print(f"with in-place add/mul: peak {r.peak_elements / u:.2f}u")
