"""Dense reference implementation of packed multi-adapter LoRA math.

Several adapters share one frozen base weight ``W`` (d x k).  Adapter ``i``
owns a down-projection ``A_i`` (d x r_i), an up-projection ``B_i``
(r_i x k), a scaling factor ``alpha_i`` and its own input slice ``x_i``
(tokens_i x d).  The forward pass is

    y_i = x_i @ W + alpha_i * (x_i @ A_i) @ B_i

computed through concatenated adapter tensors with ragged rank offsets, so
packing arbitrary rank/batch mixes never changes any adapter's result
versus running it alone.  Everything is double precision; this module
defines the numerical semantics that fused GPU kernels must reproduce, it
makes no performance claims.

Backward pass, for upstream gradients ``dY_i``:

    dB_i = alpha_i * (x_i @ A_i)^T @ dY_i          (up-projection weights)
    dH_i = alpha_i * dY_i @ B_i^T                  (up-projection input)
    dA_i = x_i^T @ dH_i                            (down-projection weights)
    dx_i = dY_i @ W^T + dH_i @ A_i^T               (input, incl. base path)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "AdapterWeights",
    "PackedAdapters",
    "GradCheckReport",
    "pack_adapters",
    "unpack_adapters",
    "adapter_forward",
    "adapter_backward",
    "packed_forward",
    "packed_backward",
    "grad_check",
]

GRAD_CHECK_TOLERANCE = 1e-5


@dataclass(frozen=True)
class AdapterWeights:
    """One adapter: down-projection (d x r), up-projection (r x k), scale."""

    down: np.ndarray
    up: np.ndarray
    alpha: float

    def __post_init__(self):
        if self.down.ndim != 2 or self.up.ndim != 2:
            raise ValueError("adapter projections must be matrices")
        if self.down.shape[1] != self.up.shape[0]:
            raise ValueError(
                f"rank mismatch: down is {self.down.shape}, up is {self.up.shape}")

    @property
    def rank(self) -> int:
        return self.down.shape[1]


@dataclass(frozen=True)
class PackedAdapters:
    """Concatenated adapters plus offset bookkeeping.

    ``down_block`` is (d x R) with adapter ``i`` in columns
    ``rank_offsets[i]:rank_offsets[i+1]``; ``up_block`` is (R x k) with the
    matching rows.  ``inputs`` stacks the per-adapter token slices along the
    sequence dimension with ``row_offsets`` boundaries.
    """

    down_block: np.ndarray
    up_block: np.ndarray
    inputs: np.ndarray
    alphas: tuple[float, ...]
    rank_offsets: tuple[int, ...]
    row_offsets: tuple[int, ...]

    def __post_init__(self):
        n = len(self.alphas)
        if len(self.rank_offsets) != n + 1 or len(self.row_offsets) != n + 1:
            raise ValueError("offset arrays must have one more entry than adapters")
        if any(a >= b for a, b in zip(self.rank_offsets, self.rank_offsets[1:])):
            raise ValueError("rank offsets must be strictly increasing")
        if any(a > b for a, b in zip(self.row_offsets, self.row_offsets[1:])):
            raise ValueError("row offsets must be non-decreasing")
        if self.rank_offsets[0] != 0 or self.rank_offsets[-1] != self.down_block.shape[1]:
            raise ValueError("rank offsets must partition the packed rank dimension")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != self.inputs.shape[0]:
            raise ValueError("row offsets must partition the packed sequence dimension")
        if self.up_block.shape[0] != self.down_block.shape[1]:
            raise ValueError("down/up blocks disagree on the packed rank dimension")
        if self.inputs.shape[1] != self.down_block.shape[0]:
            raise ValueError("inputs and down block disagree on the hidden dimension")

    @property
    def adapter_count(self) -> int:
        return len(self.alphas)

    @property
    def d(self) -> int:
        return self.down_block.shape[0]

    @property
    def k(self) -> int:
        return self.up_block.shape[1]

    def rank_slice(self, i: int) -> slice:
        return slice(self.rank_offsets[i], self.rank_offsets[i + 1])

    def row_slice(self, i: int) -> slice:
        return slice(self.row_offsets[i], self.row_offsets[i + 1])

    def adapter(self, i: int) -> AdapterWeights:
        rs = self.rank_slice(i)
        return AdapterWeights(down=self.down_block[:, rs], up=self.up_block[rs, :],
                              alpha=self.alphas[i])

    def input_slice(self, i: int) -> np.ndarray:
        return self.inputs[self.row_slice(i)]


def pack_adapters(adapters: Sequence[AdapterWeights],
                  inputs: Sequence[np.ndarray]) -> PackedAdapters:
    """Concatenate adapters and their input slices into one packed structure."""
    if not adapters:
        raise ValueError("nothing to pack")
    if len(adapters) != len(inputs):
        raise ValueError(f"{len(adapters)} adapters but {len(inputs)} inputs")
    d = adapters[0].down.shape[0]
    k = adapters[0].up.shape[1]
    for i, a in enumerate(adapters):
        if a.down.shape[0] != d or a.up.shape[1] != k:
            raise ValueError(
                f"adapter {i} has shape ({a.down.shape[0]}, {a.up.shape[1]}), "
                f"expected ({d}, {k})")
    for i, x in enumerate(inputs):
        if x.ndim != 2 or x.shape[1] != d:
            raise ValueError(f"input {i} must be (tokens, {d}), got {x.shape}")

    rank_offsets = [0]
    row_offsets = [0]
    for a, x in zip(adapters, inputs):
        rank_offsets.append(rank_offsets[-1] + a.rank)
        row_offsets.append(row_offsets[-1] + x.shape[0])
    return PackedAdapters(
        down_block=np.concatenate([a.down for a in adapters], axis=1),
        up_block=np.concatenate([a.up for a in adapters], axis=0),
        inputs=np.concatenate(list(inputs), axis=0),
        alphas=tuple(float(a.alpha) for a in adapters),
        rank_offsets=tuple(rank_offsets),
        row_offsets=tuple(row_offsets),
    )


def unpack_adapters(packed: PackedAdapters) -> tuple[list[AdapterWeights], list[np.ndarray]]:
    adapters = [packed.adapter(i) for i in range(packed.adapter_count)]
    inputs = [packed.input_slice(i).copy() for i in range(packed.adapter_count)]
    return adapters, inputs


def adapter_forward(adapter: AdapterWeights, x: np.ndarray, w_base: np.ndarray) -> np.ndarray:
    """Single-adapter reference: y = x W + alpha (x A) B."""
    return x @ w_base + adapter.alpha * (x @ adapter.down) @ adapter.up


def adapter_backward(adapter: AdapterWeights, x: np.ndarray, w_base: np.ndarray,
                     upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-adapter reference gradients (d_down, d_up, d_input)."""
    hidden = x @ adapter.down
    d_up = adapter.alpha * hidden.T @ upstream
    d_hidden = adapter.alpha * upstream @ adapter.up.T
    d_down = x.T @ d_hidden
    d_input = upstream @ w_base.T + d_hidden @ adapter.down.T
    return d_down, d_up, d_input


def packed_forward(packed: PackedAdapters, w_base: np.ndarray) -> list[np.ndarray]:
    """Forward pass through the packed tensors; returns per-adapter outputs.

    The base matmul is batched over all input slices at once; the adapter
    path runs one packed hidden projection and per-adapter up-projections
    selected by the rank offsets.
    """
    if w_base.shape != (packed.d, packed.k):
        raise ValueError(f"base weight must be ({packed.d}, {packed.k}), got {w_base.shape}")
    base = packed.inputs @ w_base
    hidden = packed.inputs @ packed.down_block
    outputs = []
    for i in range(packed.adapter_count):
        rows, cols = packed.row_slice(i), packed.rank_slice(i)
        lora = packed.alphas[i] * hidden[rows, cols] @ packed.up_block[cols, :]
        outputs.append(base[rows] + lora)
    return outputs


def packed_backward(packed: PackedAdapters, w_base: np.ndarray,
                    upstreams: Sequence[np.ndarray]
                    ) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Backward pass; returns per-adapter (d_down, d_up, d_input)."""
    if len(upstreams) != packed.adapter_count:
        raise ValueError(
            f"{packed.adapter_count} adapters but {len(upstreams)} upstream gradients")
    for i, dy in enumerate(upstreams):
        rows = packed.row_slice(i)
        expected = (rows.stop - rows.start, packed.k)
        if dy.shape != expected:
            raise ValueError(f"upstream {i} must be {expected}, got {dy.shape}")
    dy_block = np.concatenate(list(upstreams), axis=0)
    d_input_base = dy_block @ w_base.T
    hidden = packed.inputs @ packed.down_block

    d_downs, d_ups, d_inputs = [], [], []
    for i in range(packed.adapter_count):
        rows, cols = packed.row_slice(i), packed.rank_slice(i)
        alpha = packed.alphas[i]
        x = packed.inputs[rows]
        dy = dy_block[rows]
        d_up = alpha * hidden[rows, cols].T @ dy
        d_hidden = alpha * dy @ packed.up_block[cols, :].T
        d_down = x.T @ d_hidden
        d_input = d_input_base[rows] + d_hidden @ packed.down_block[:, cols].T
        d_downs.append(d_down)
        d_ups.append(d_up)
        d_inputs.append(d_input)
    return d_downs, d_ups, d_inputs


# --- finite-difference verification -------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    """Max relative finite-difference error per gradient case.

    Case keys: ``up_weight`` (up-projection weights), ``up_input`` (the
    hidden activations feeding the up-projection), ``down_weight``
    (down-projection weights), ``down_input`` (adapter inputs, including
    the base path).
    """

    case_errors: dict[str, float]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max(self.case_errors.values())

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _central_diff(loss, array: np.ndarray, step: float) -> np.ndarray:
    grad = np.empty_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + step
        up = loss()
        array[idx] = orig - step
        down = loss()
        array[idx] = orig
        grad[idx] = (up - down) / (2 * step)
    return grad


def grad_check(packed: PackedAdapters, w_base: np.ndarray, seed: int = 0,
               step: float = 1e-6,
               tolerance: float = GRAD_CHECK_TOLERANCE) -> GradCheckReport:
    """Central finite differences on every entry of the packed tensors.

    A random upstream gradient defines the scalar loss
    ``sum_i <dY_i, y_i>``; each analytic gradient case is compared against
    numeric differentiation of that loss.  Relative error uses an absolute
    floor of 1 so zero gradients are compared sensibly.
    """
    rng = np.random.default_rng(seed)
    upstreams = [rng.standard_normal((packed.row_offsets[i + 1] - packed.row_offsets[i],
                                      packed.k))
                 for i in range(packed.adapter_count)]

    down = packed.down_block.copy()
    up = packed.up_block.copy()
    inputs = packed.inputs.copy()

    def rebuild() -> PackedAdapters:
        return PackedAdapters(down_block=down, up_block=up, inputs=inputs,
                              alphas=packed.alphas, rank_offsets=packed.rank_offsets,
                              row_offsets=packed.row_offsets)

    def loss() -> float:
        outputs = packed_forward(rebuild(), w_base)
        return float(sum(np.sum(dy * y) for dy, y in zip(upstreams, outputs)))

    d_downs, d_ups, d_inputs = packed_backward(rebuild(), w_base, upstreams)

    analytic_down = np.concatenate(d_downs, axis=1)
    analytic_up = np.concatenate(d_ups, axis=0)
    analytic_input = np.concatenate(d_inputs, axis=0)

    errors = {
        "up_weight": _rel_err(analytic_up, _central_diff(loss, up, step)),
        "down_weight": _rel_err(analytic_down, _central_diff(loss, down, step)),
        "down_input": _rel_err(analytic_input, _central_diff(loss, inputs, step)),
    }

    # The hidden activations are an intermediate, not a stored tensor; check
    # their gradient against a loss that treats them as the free variable.
    hidden0 = inputs @ down
    analytic_hidden = np.zeros_like(hidden0)
    for i in range(packed.adapter_count):
        rows, cols = packed.row_slice(i), packed.rank_slice(i)
        analytic_hidden[rows, cols] = packed.alphas[i] * upstreams[i] @ up[cols, :].T
    hidden = hidden0.copy()

    def hidden_loss() -> float:
        total = 0.0
        for i in range(packed.adapter_count):
            rows, cols = packed.row_slice(i), packed.rank_slice(i)
            y = inputs[rows] @ w_base + packed.alphas[i] * hidden[rows, cols] @ up[cols, :]
            total += float(np.sum(upstreams[i] * y))
        return total

    numeric_hidden = _central_diff(hidden_loss, hidden, step)
    errors["up_input"] = _rel_err(analytic_hidden, numeric_hidden)

    ordered = {key: errors[key] for key in ("up_weight", "up_input", "down_weight", "down_input")}
    return GradCheckReport(case_errors=ordered, tolerance=tolerance)
