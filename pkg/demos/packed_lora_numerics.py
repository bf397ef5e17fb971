#!/usr/bin/env python3
"""Numerical semantics of packed multi-adapter LoRA.

Three adapters with different ranks and input slices share one frozen base
weight.  The packed forward/backward pass over the concatenated tensors
must equal running each adapter alone, and every analytic gradient must
match central finite differences.
"""

import numpy as np

from lorasweep import (
    AdapterWeights,
    adapter_backward,
    adapter_forward,
    grad_check,
    pack_adapters,
    packed_backward,
    packed_forward,
    unpack_adapters,
)


def main():
    rng = np.random.default_rng(0)
    d, k = 12, 10
    ranks = (2, 5, 3)
    tokens = (4, 2, 6)
    adapters = [AdapterWeights(down=rng.standard_normal((d, r)),
                               up=rng.standard_normal((r, k)),
                               alpha=float(alpha))
                for r, alpha in zip(ranks, (0.5, 1.0, 2.0))]
    inputs = [rng.standard_normal((t, d)) for t in tokens]
    w_base = rng.standard_normal((d, k))

    packed = pack_adapters(adapters, inputs)
    print(f"packed {packed.adapter_count} adapters: rank offsets "
          f"{packed.rank_offsets}, input row offsets {packed.row_offsets}")

    back_adapters, back_inputs = unpack_adapters(packed)
    assert all(np.array_equal(a.down, b.down) for a, b in zip(adapters, back_adapters))
    assert all(np.array_equal(x, y) for x, y in zip(inputs, back_inputs))
    print("unpack(pack(...)) reproduced every tensor exactly")

    outs = packed_forward(packed, w_base)
    print("\npacked forward vs. one-adapter-at-a-time:")
    for i, (adapter, x) in enumerate(zip(adapters, inputs)):
        solo = adapter_forward(adapter, x, w_base)
        diff = float(np.max(np.abs(outs[i] - solo)))
        print(f"  adapter {i} (rank {adapter.rank:2d}, {x.shape[0]} tokens): "
              f"max |difference| = {diff:.2e}")

    ups = [rng.standard_normal(y.shape) for y in outs]
    d_downs, d_ups, d_inputs = packed_backward(packed, w_base, ups)
    print("\npacked backward vs. one-adapter-at-a-time:")
    for i, (adapter, x, dy) in enumerate(zip(adapters, inputs, ups)):
        rd, ru, rx = adapter_backward(adapter, x, w_base, dy)
        diff = max(float(np.max(np.abs(d_downs[i] - rd))),
                   float(np.max(np.abs(d_ups[i] - ru))),
                   float(np.max(np.abs(d_inputs[i] - rx))))
        print(f"  adapter {i}: max |difference| over (dA, dB, dx) = {diff:.2e}")

    print("\ncentral finite differences on every packed tensor entry:")
    report = grad_check(packed, w_base, seed=7)
    labels = {
        "up_weight": "case 1  d(up-projection weights)",
        "up_input": "case 2  d(up-projection inputs)",
        "down_weight": "case 3  d(down-projection weights)",
        "down_input": "case 4  d(adapter inputs, incl. base path)",
    }
    for case, err in report.case_errors.items():
        status = "PASS" if err < report.tolerance else "FAIL"
        print(f"  {labels[case]:44s} max rel err {err:.2e}  {status}")
    print(f"overall: {'PASS' if report.passed else 'FAIL'} "
          f"(tolerance {report.tolerance:g})")


if __name__ == "__main__":
    main()
