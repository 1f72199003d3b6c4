"""The topology DSL, the three shipped presets, and the analytic counters.

Every model is a short piece of text: `c5 s2 64` is a 5x5 stride-2
convolution with 64 filters, `ru`/`tru` are residual and transposed
residual units, `out 7` the 1x1 classifier. Parameter and operation
budgets fall out of the spec analytically, without building the network.
"""

import numpy as np

from seistile.network import build_model
from seistile.tensor import Tensor
from seistile.topology import (
    TABLE_OPS_PER_MAC,
    count_operations,
    count_parameters,
    count_running_stats,
    forward_shape,
    parse_topology,
    preset,
    preset_names,
    render_topology,
    scale_widths,
)

custom = parse_topology("""
# a toy encoder/decoder
c5 s2 16
ru s2 32
tru s2 16
tc5 s2 8
out 7
""", name="toy")
print("toy topology:", [f"{l.kind}x{l.channels}" for l in custom.layers])
print("round-trips: ", parse_topology(render_topology(custom), name="toy") == custom)
print("80x120 ->", forward_shape(custom, 80, 120))

print(f"\n{'name':12s} {'params':>12s} {'ops@80x120':>12s} {'ops@128x128':>13s}   (mode: {TABLE_OPS_PER_MAC} op/MAC)")
for name in preset_names():
    spec = preset(name)
    print(f"{name:12s} {count_parameters(spec):>12,} "
          f"{count_operations(spec, 80, 120, TABLE_OPS_PER_MAC) / 1e6:>11.0f}M "
          f"{count_operations(spec, 128, 128, TABLE_OPS_PER_MAC) / 1e6:>12.0f}M")

spec = preset("danet-fcn2")
print("\nrunning (non-learnable) batch-norm stats:", count_running_stats(spec))

# width scaling keeps the classifier and shrinks everything else
small = scale_widths(spec, 0.1, name="danet-fcn2-w0.1")
print(f"width 0.1 variant: {count_parameters(small):,} params")

model = build_model(small, seed=0, dtype=np.float32)
x = Tensor(np.zeros((1, 80, 120, 1), dtype=np.float32))
print("built model forward:", model.forward(x, train=False).shape)
print("learnable tensors:", len(model.parameters()),
      "| elements match analytic count:",
      sum(t.size for _, t, _ in model.parameters()) == count_parameters(small))
