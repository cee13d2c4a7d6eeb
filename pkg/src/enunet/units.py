"""Evolvable gated recurrent micro-cells: parameters, state, stepping, genomes.

A unit is a tiny gated recurrent cell. Update, reset and cell gates guard a
length-k memory vector ("dynamic parameters"); an output gate maps the new
memory to c channels and hard-clips them to [0, 1]. Every gate reads the
concatenation [h_prev, o_prev, x] of memory, previous output and current
input, so the previous output is fed back as input. There are no bias terms.

Three step entry points share the same math:

* :func:`enu_step` - one instance, reference clarity.
* :func:`enu_step_batch` - B instances sharing one parameter set.
* :func:`enu_step_stacked` - P parameter sets x B instances each, as stacked
  3-D matrix products; this is what the evolution evaluators run on.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

GENOME_SCHEMA_VERSION = 1


class ShapeError(ValueError):
    """An input array does not match the unit's declared dimensions."""


class LayoutError(ValueError):
    """A genome vector is inconsistent with its declared layout."""


def sigmoid(x):
    # 0.5*(1+tanh(x/2)) == 1/(1+exp(-x)); numpy vectorizes float32 tanh far
    # better than exp, and this form cannot overflow.
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_inplace(x):
    x *= 0.5
    np.tanh(x, out=x)
    x += 1.0
    x *= 0.5
    return x


@dataclass(frozen=True)
class ENUDims:
    """Sizes of one unit: k memory cells, c output channels, d input channels."""

    memory: int
    channels: int
    inputs: int

    def __post_init__(self):
        for name in ("memory", "channels", "inputs"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def gate_width(self) -> int:
        """Width of the concatenated gate input [h_prev, o_prev, x]."""
        return self.memory + self.channels + self.inputs

    @property
    def n_params(self) -> int:
        """Flat weight count: three k x gate_width gates plus the c x k output gate."""
        return 3 * self.memory * self.gate_width + self.channels * self.memory


@dataclass
class ENUParams:
    """The four evolvable gate matrices of one chromosome.

    ``w_update``, ``w_reset``, ``w_cell`` are (k, k+c+d); ``w_out`` is (c, k).
    Immutable by convention once built: evaluators share one instance across
    every concurrent rollout.
    """

    w_update: np.ndarray
    w_reset: np.ndarray
    w_cell: np.ndarray
    w_out: np.ndarray
    dims: ENUDims

    def __post_init__(self):
        k, c, w = self.dims.memory, self.dims.channels, self.dims.gate_width
        for name, want in (
            ("w_update", (k, w)),
            ("w_reset", (k, w)),
            ("w_cell", (k, w)),
            ("w_out", (c, k)),
        ):
            arr = getattr(self, name)
            if arr.shape != want:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")

    def astype(self, dtype) -> "ENUParams":
        return ENUParams(
            self.w_update.astype(dtype),
            self.w_reset.astype(dtype),
            self.w_cell.astype(dtype),
            self.w_out.astype(dtype),
            self.dims,
        )


@dataclass
class ENUState:
    """Per-instance memory vector h and previous output o_prev."""

    h: np.ndarray
    o_prev: np.ndarray

    @classmethod
    def zeros(cls, dims: ENUDims, dtype=np.float64) -> "ENUState":
        return cls(np.zeros(dims.memory, dtype=dtype), np.zeros(dims.channels, dtype=dtype))

    def copy(self) -> "ENUState":
        return ENUState(self.h.copy(), self.o_prev.copy())


def init_params(dims: ENUDims, seed: int, init_std: float = 0.1) -> ENUParams:
    """Gaussian(0, init_std^2) weights, deterministic given (dims, seed, init_std)."""
    if init_std < 0:
        raise ValueError("init_std must be nonnegative")
    rng = np.random.default_rng(_norm_seed(seed))
    k, c, w = dims.memory, dims.channels, dims.gate_width
    return ENUParams(
        w_update=rng.normal(0.0, init_std, (k, w)),
        w_reset=rng.normal(0.0, init_std, (k, w)),
        w_cell=rng.normal(0.0, init_std, (k, w)),
        w_out=rng.normal(0.0, init_std, (c, k)),
        dims=dims,
    )


def _norm_seed(seed) -> int:
    # SeedSequence wants nonnegative entropy; fold Python ints of any sign.
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def enu_step(
    params: ENUParams,
    state: ENUState,
    x: np.ndarray,
    output_noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """Advance one instance a single time step.

    Returns ``(new_state, o)`` where ``o`` is the clipped output vector. With
    ``output_noise_std > 0`` a fresh Gaussian is added per channel before the
    clip, drawn from ``rng``.
    """
    d = params.dims.inputs
    x = np.asarray(x)
    if x.shape != (d,):
        raise ShapeError(f"input has shape {x.shape}, expected ({d},)")
    h, o_prev = state.h, state.o_prev
    gate_in = np.concatenate([h, o_prev, x])
    z = sigmoid(params.w_update @ gate_in)
    r = sigmoid(params.w_reset @ gate_in)
    h_cand = np.tanh(params.w_cell @ np.concatenate([r * h, o_prev, x]))
    h_new = (1.0 - z) * h + z * h_cand
    o = params.w_out @ h_new
    if output_noise_std > 0.0:
        if rng is None:
            raise ValueError("output_noise_std > 0 requires an rng")
        o = o + output_noise_std * rng.standard_normal(o.shape[0])
    o = np.clip(o, 0.0, 1.0)
    return ENUState(h_new, o), o


def enu_step_batch(
    params: ENUParams,
    h: np.ndarray,
    o_prev: np.ndarray,
    xs: np.ndarray,
    output_noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
):
    """Advance B instances sharing one parameter set.

    ``h`` is (B, k), ``o_prev`` (B, c), ``xs`` (B, d). Equivalent to applying
    :func:`enu_step` to each row independently; implemented as whole-batch
    matrix products. ``noise`` (B, c), when given, is the exact per-instance
    pre-clip output perturbation (used to reproduce sequential noise draws);
    otherwise noise is drawn from ``rng`` when ``output_noise_std > 0``.

    Returns ``(h_new, o)`` as (B, k) and (B, c) arrays.
    """
    k, c, d = params.dims.memory, params.dims.channels, params.dims.inputs
    h = np.asarray(h)
    o_prev = np.asarray(o_prev)
    xs = np.asarray(xs)
    if h.ndim != 2 or h.shape[1] != k or o_prev.shape != (h.shape[0], c) or xs.shape != (h.shape[0], d):
        raise ShapeError(
            f"batch shapes h={h.shape} o_prev={o_prev.shape} xs={xs.shape} "
            f"inconsistent with dims k={k} c={c} d={d}"
        )
    gate_in = np.concatenate([h, o_prev, xs], axis=1)
    z = sigmoid(gate_in @ params.w_update.T)
    r = sigmoid(gate_in @ params.w_reset.T)
    cell_in = np.concatenate([r * h, o_prev, xs], axis=1)
    h_cand = np.tanh(cell_in @ params.w_cell.T)
    h_new = (1.0 - z) * h + z * h_cand
    o = h_new @ params.w_out.T
    if noise is not None:
        o = o + noise
    elif output_noise_std > 0.0:
        if rng is None:
            raise ValueError("output_noise_std > 0 requires an rng or explicit noise")
        o = o + output_noise_std * rng.standard_normal(o.shape)
    o = np.clip(o, 0.0, 1.0)
    return h_new, o


def stack_states(states) -> tuple[np.ndarray, np.ndarray]:
    """Pack a sequence of ENUState into (B, k) and (B, c) arrays."""
    return np.stack([s.h for s in states]), np.stack([s.o_prev for s in states])


def unstack_states(h: np.ndarray, o_prev: np.ndarray) -> list[ENUState]:
    return [ENUState(h[i].copy(), o_prev[i].copy()) for i in range(h.shape[0])]


# ---------------------------------------------------------------------------
# Stacked (population) stepping: P parameter sets, B instances per set.
# ---------------------------------------------------------------------------


@dataclass
class StackedGates:
    """Gate weights for P chromosomes, pre-transposed for (P,B,*) matmuls.

    ``w_zr_t`` is (P, gate_width, 2k) holding update|reset side by side,
    ``w_cell_t`` (P, gate_width, k), ``w_out_t`` (P, k, c).
    """

    w_zr_t: np.ndarray
    w_cell_t: np.ndarray
    w_out_t: np.ndarray
    dims: ENUDims

    @property
    def n(self) -> int:
        return self.w_zr_t.shape[0]

    def take(self, idx) -> "StackedGates":
        """Row-subset view copy, e.g. to drop finished instances."""
        return StackedGates(self.w_zr_t[idx], self.w_cell_t[idx], self.w_out_t[idx], self.dims)

    def repeat(self, times: int) -> "StackedGates":
        """Each parameter set repeated ``times`` consecutively (one copy per instance)."""
        return StackedGates(
            np.repeat(self.w_zr_t, times, axis=0),
            np.repeat(self.w_cell_t, times, axis=0),
            np.repeat(self.w_out_t, times, axis=0),
            self.dims,
        )


def stack_chromosome(values: np.ndarray, dims: ENUDims, dtype=np.float32) -> StackedGates:
    """Unpack (P, n_params) flat chromosome rows into stacked gate tensors."""
    values = np.atleast_2d(np.asarray(values))
    if values.shape[1] != dims.n_params:
        raise LayoutError(
            f"chromosome rows have length {values.shape[1]}, expected {dims.n_params}"
        )
    p = values.shape[0]
    k, c, w = dims.memory, dims.channels, dims.gate_width
    kw = k * w
    wz = values[:, :kw].reshape(p, k, w)
    wr = values[:, kw : 2 * kw].reshape(p, k, w)
    wc = values[:, 2 * kw : 3 * kw].reshape(p, k, w)
    wo = values[:, 3 * kw :].reshape(p, c, k)
    w_zr = np.concatenate([wz, wr], axis=1)  # (P, 2k, w)
    return StackedGates(
        w_zr_t=np.ascontiguousarray(w_zr.transpose(0, 2, 1), dtype=dtype),
        w_cell_t=np.ascontiguousarray(wc.transpose(0, 2, 1), dtype=dtype),
        w_out_t=np.ascontiguousarray(wo.transpose(0, 2, 1), dtype=dtype),
        dims=dims,
    )


def enu_step_stacked(
    gates: StackedGates,
    h: np.ndarray,
    o_prev: np.ndarray,
    x: np.ndarray,
    noise: np.ndarray | None = None,
):
    """Advance P parameter sets x B instances in stacked matrix products.

    ``h`` is (P, B, k), ``o_prev`` (P, B, c), ``x`` (P, B, d) or broadcastable
    to it (episode inputs shared across parameter sets). ``noise``, when
    given, is added to the output pre-clip and must broadcast to (P, B, c).
    Returns new ``(h, o)``; inputs are not modified.
    """
    k, c, d = gates.dims.memory, gates.dims.channels, gates.dims.inputs
    p, b = h.shape[0], h.shape[1]
    buf = np.empty((p, b, gates.dims.gate_width), dtype=h.dtype)
    buf[..., :k] = h
    buf[..., k : k + c] = o_prev
    buf[..., k + c :] = x
    zr = np.matmul(buf, gates.w_zr_t)
    _sigmoid_inplace(zr)
    z = zr[..., :k]
    r = zr[..., k:]
    buf[..., :k] *= r  # cell-gate input reuses the buffer: [r*h, o_prev, x]
    h_new = np.matmul(buf, gates.w_cell_t)
    np.tanh(h_new, out=h_new)
    # (1-z)*h + z*h_cand, written as h + z*(h_cand - h)
    h_new -= h
    h_new *= z
    h_new += h
    o = np.matmul(h_new, gates.w_out_t)
    if noise is not None:
        o += noise
    np.clip(o, 0.0, 1.0, out=o)
    return h_new, o


# ---------------------------------------------------------------------------
# Genomes: flat vectors of one or more chromosomes.
# ---------------------------------------------------------------------------

Layout = tuple[tuple[str, ENUDims], ...]


@dataclass
class Genome:
    """A flat real vector plus the layout that unflattens it into chromosomes.

    Segment order inside each chromosome is (w_update, w_reset, w_cell, w_out),
    row-major; chromosomes follow the declared layout order.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.layout = tuple((str(n), d) for n, d in self.layout)
        names = [n for n, _ in self.layout]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate chromosome names in layout: {names}")
        self.values = np.asarray(self.values, dtype=np.float64)
        want = layout_length(self.layout)
        if self.values.ndim != 1 or self.values.size != want:
            raise LayoutError(
                f"genome has {self.values.size} values, layout requires {want}"
            )

    def segments(self) -> list[tuple[str, ENUDims, np.ndarray]]:
        """Per-chromosome (name, dims, flat view), in layout order."""
        out = []
        start = 0
        for name, dims in self.layout:
            out.append((name, dims, self.values[start : start + dims.n_params]))
            start += dims.n_params
        return out

    def copy(self) -> "Genome":
        return Genome(self.values.copy(), self.layout)


def layout_length(layout: Layout) -> int:
    return sum(dims.n_params for _, dims in layout)


def flatten(named_params) -> Genome:
    """Pack [(name, ENUParams), ...] into one flat genome."""
    parts = []
    layout = []
    for name, p in named_params:
        layout.append((name, p.dims))
        parts.extend(
            [p.w_update.ravel(), p.w_reset.ravel(), p.w_cell.ravel(), p.w_out.ravel()]
        )
    return Genome(np.concatenate(parts), tuple(layout))


def unflatten(genome: Genome) -> list[tuple[str, ENUParams]]:
    """Inverse of :func:`flatten`; exact round trip."""
    out = []
    for name, dims, seg in genome.segments():
        k, c, w = dims.memory, dims.channels, dims.gate_width
        kw = k * w
        out.append(
            (
                name,
                ENUParams(
                    w_update=seg[:kw].reshape(k, w).copy(),
                    w_reset=seg[kw : 2 * kw].reshape(k, w).copy(),
                    w_cell=seg[2 * kw : 3 * kw].reshape(k, w).copy(),
                    w_out=seg[3 * kw :].reshape(c, k).copy(),
                    dims=dims,
                ),
            )
        )
    return out


def genome_to_dict(genome: Genome) -> dict:
    return {
        "schema_version": GENOME_SCHEMA_VERSION,
        "layout": [
            {"name": name, "k": d.memory, "c": d.channels, "d": d.inputs}
            for name, d in genome.layout
        ],
        "values": [float(v) for v in genome.values],
    }


def genome_from_dict(obj: dict) -> Genome:
    if obj.get("schema_version") != GENOME_SCHEMA_VERSION:
        raise LayoutError(f"unsupported genome schema_version {obj.get('schema_version')!r}")
    layout = tuple(
        (e["name"], ENUDims(int(e["k"]), int(e["c"]), int(e["d"]))) for e in obj["layout"]
    )
    return Genome(np.array(obj["values"], dtype=np.float64), layout)


def save_genome(genome: Genome, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(genome_to_dict(genome), f)
    os.replace(tmp, path)


def load_genome(path) -> Genome:
    with open(path) as f:
        return genome_from_dict(json.load(f))
