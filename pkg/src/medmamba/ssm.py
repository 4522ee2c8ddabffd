"""Continuous-to-discrete state-space machinery and the selective scan.

A diagonal transition matrix is stored in log space (A = -exp(A_log)) so
it stays strictly negative; per-timestep step sizes and input/output
projections are generated from the current feature vector, discretized
with an exact zero-order hold, and run through the sequential recurrence
forward and (time-reversed) backward.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import scan_kernels
from .errors import NumericError
from .numerics import Rng, Tensor
from .numerics import ops

TIME_AXIS = -2  # sequences are [.., L, D]


@dataclass
class SsmParams:
    """One scan direction's learnable tensors.

    a_log: [D_inner, N]  (transition A = -exp(a_log), strictly negative)
    w_delta/b_delta: step-size projection [D_inner, D_inner] / [D_inner]
    w_b, w_c: input/output projections [N, D_inner]
    d_skip: feed-through [D_inner]
    """
    a_log: Tensor
    w_delta: Tensor
    b_delta: Tensor
    w_b: Tensor
    w_c: Tensor
    d_skip: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.A_log": self.a_log,
            f"{prefix}.w_delta": self.w_delta,
            f"{prefix}.b_delta": self.b_delta,
            f"{prefix}.w_b": self.w_b,
            f"{prefix}.w_c": self.w_c,
            f"{prefix}.d_skip": self.d_skip,
        }


@dataclass
class ScanInputs:
    """Per-timestep discretized quantities feeding the recurrence.

    abar, bbar_u: [L, D_inner, N] (abar in (0, 1] when built from negative
    A and positive delta); c_seq: [L, N]; d_skip: [D_inner]; u: [L, D_inner].
    A leading batch axis is accepted on abar/bbar_u/c_seq/u.
    """
    abar: Tensor
    bbar_u: Tensor
    c_seq: Tensor
    d_skip: Tensor
    u: Tensor


DT_INIT_RANGE = (0.001, 0.1)


def s4d_init(d_inner: int, n_state: int, rng: Rng, dtype=np.float64) -> SsmParams:
    """Diagonal-real initialization: A row = -(1, 2, ..., N).

    Step-size biases are set so softplus(b_delta) is log-uniform in
    [0.001, 0.1]; projection weights are scaled normal; d_skip is one.
    """
    if d_inner < 1 or n_state < 1:
        raise ValueError("s4d_init: dimensions must be >= 1")
    a_log = np.tile(np.log(np.arange(1, n_state + 1, dtype=np.float64)), (d_inner, 1))
    lo, hi = np.log(DT_INIT_RANGE[0]), np.log(DT_INIT_RANGE[1])
    dt = np.exp(rng.split("b_delta").uniform(lo, hi, (d_inner,)))
    b_delta = np.log(np.expm1(dt))  # inverse softplus
    scale = d_inner ** -0.5
    return SsmParams(
        a_log=Tensor(a_log.astype(dtype)),
        w_delta=Tensor(rng.split("w_delta").normal((d_inner, d_inner), scale, dtype)),
        b_delta=Tensor(b_delta.astype(dtype)),
        w_b=Tensor(rng.split("w_b").normal((n_state, d_inner), scale, dtype)),
        w_c=Tensor(rng.split("w_c").normal((n_state, d_inner), scale, dtype)),
        d_skip=Tensor(np.ones(d_inner, dtype=dtype)),
    )


def selective_projections(x: Tensor, p: SsmParams):
    """Input-dependent (delta, B, C) for each timestep of x [.., L, D_inner].

    delta = softplus(x W_delta^T + b_delta) is strictly positive; B and C
    are plain linear maps to the state dimension.
    """
    delta = ops.softplus(ops.add(ops.matmul(x, ops.transpose(p.w_delta)), p.b_delta))
    b_seq = ops.matmul(x, ops.transpose(p.w_b))
    c_seq = ops.matmul(x, ops.transpose(p.w_c))
    return delta, b_seq, c_seq


def zoh_discretize(a: Tensor, delta: Tensor, b_seq: Tensor):
    """Exact zero-order hold for diagonal A.

    abar = exp(delta * a); bbar = delta * (exp(delta*a) - 1)/(delta*a) * B,
    with the series branch 1 + x/2 taking over for |delta*a| < 1e-4.
    Requires delta > 0 elementwise.
    """
    if not np.all(delta.data > 0):
        raise NumericError("zoh_discretize: delta must be positive everywhere")
    x = ops.mul(ops.reshape(delta, delta.shape + (1,)), a)  # [.., L, D, N]
    abar = ops.exp(x)
    phi = ops.expm1_over_x(x)
    bbar = ops.mul(ops.mul(ops.reshape(delta, delta.shape + (1,)), phi),
                   ops.reshape(b_seq, b_seq.shape[:-1] + (1, b_seq.shape[-1])))
    return abar, bbar


def selective_scan(s: ScanInputs) -> Tensor:
    """Left-to-right recurrence h_t = abar_t * h_{t-1} + bbar_u_t (h_0 = 0),
    read out as y_t = sum_n c_t[n] h_t[:, n] + d_skip * u_t. Differentiable
    in all five inputs."""
    squeeze = s.abar.ndim == 3
    abar = s.abar.data[None] if squeeze else s.abar.data
    bu = s.bbar_u.data[None] if squeeze else s.bbar_u.data
    c = s.c_seq.data[None] if squeeze else s.c_seq.data
    u = s.u.data[None] if squeeze else s.u.data
    d_skip = s.d_skip.data
    abar, bu, c, u = (np.ascontiguousarray(v) for v in (abar, bu, c, u))
    y, h = scan_kernels.scan_forward(abar, bu, c, d_skip, u)
    out = Tensor(y[0] if squeeze else y)

    inputs = (s.abar, s.bbar_u, s.c_seq, s.d_skip, s.u)

    def vjp(g):
        gy = np.ascontiguousarray(g[None] if squeeze else g)
        gabar, gbu, gc, gd, gu = scan_kernels.scan_backward(abar, c, d_skip, u, h, gy)
        if squeeze:
            gabar, gbu, gc, gu = gabar[0], gbu[0], gc[0], gu[0]
        return (gabar, gbu, gc, gd, gu)

    ops._record(out, inputs, vjp)
    return out


def scan_pipeline(x: Tensor, p: SsmParams, a_log: Tensor | None = None) -> Tensor:
    """Full input-dependent scan of x [.., L, D_inner] with one direction's
    parameters; ``a_log`` overrides the transition (used to share A)."""
    a = ops.neg(ops.exp(a_log if a_log is not None else p.a_log))
    delta, b_seq, c_seq = selective_projections(x, p)
    abar, bbar = zoh_discretize(a, delta, b_seq)
    bbar_u = ops.mul(bbar, ops.reshape(x, x.shape + (1,)))
    return selective_scan(ScanInputs(abar, bbar_u, c_seq, p.d_skip, x))


def bidirectional_scan(x: Tensor, p_fwd: SsmParams, p_bwd: SsmParams,
                       shared_a: bool = False) -> Tensor:
    """Sum of the forward scan and the time-reversed backward scan.

    The backward direction is reverse -> scan -> reverse, so its impulse
    response is the anti-causal mirror of a forward scan's.
    """
    y_fwd = scan_pipeline(x, p_fwd)
    x_rev = ops.flip(x, axis=TIME_AXIS)
    y_bwd = ops.flip(
        scan_pipeline(x_rev, p_bwd, a_log=p_fwd.a_log if shared_a else None),
        axis=TIME_AXIS)
    return ops.add(y_fwd, y_bwd)


# ---------------------------------------------------------------------------
# complexity probe

@dataclass
class ProbeRow:
    length: int
    median_seconds: float


@dataclass
class ProbeResult:
    rows: list[ProbeRow]
    loglog_slope: float

    def doubling_ratios(self) -> list[float]:
        return [self.rows[i + 1].median_seconds / self.rows[i].median_seconds
                for i in range(len(self.rows) - 1)]


def _random_selective_inputs(length: int, d_inner: int, n_state: int, rng: Rng):
    a = -np.exp(rng.split("a").normal((d_inner, n_state), 0.5))
    delta = np.exp(rng.split("delta").uniform(np.log(1e-3), np.log(0.5),
                                              (length, d_inner)))
    b_seq = rng.split("b").normal((length, n_state))
    c_seq = rng.split("c").normal((length, n_state))
    d_skip = rng.split("d").normal((d_inner,))
    u = rng.split("u").normal((length, d_inner))
    return a, delta, b_seq, c_seq, d_skip, u


def interleaved_scan_medians(shapes: list[tuple[int, int, int]],
                             repeats: int = 5, seed: int = 0) -> list[float]:
    """Median wall-clock seconds of one full selective scan per shape.

    Times the fused kernel (inline zero-order hold) whose working set is
    O(L*(D+N)); materializing the discretized tensors would make a length
    sweep measure cache bandwidth rather than the recurrence's arithmetic.
    Shapes are measured in interleaved rounds so machine-load drift does
    not bias any one of them.
    """
    inputs = [_random_selective_inputs(L, d, n, Rng(seed).split("probe", L, d, n))
              for (L, d, n) in shapes]
    for args in inputs:
        scan_kernels.scan_fused(*args)  # warm-up (JIT compile, page-in)
    times: list[list[float]] = [[] for _ in shapes]
    for _ in range(max(repeats, 1)):
        for slot, args in enumerate(inputs):
            t0 = time.perf_counter()
            scan_kernels.scan_fused(*args)
            times[slot].append(time.perf_counter() - t0)
    return [float(np.median(ts)) for ts in times]


def median_scan_time(length: int, d_inner: int, n_state: int,
                     repeats: int = 5, seed: int = 0) -> float:
    return interleaved_scan_medians([(length, d_inner, n_state)], repeats, seed)[0]


def scan_complexity_probe(lengths: list[int], d_inner: int, n_state: int,
                          repeats: int = 5, seed: int = 0) -> ProbeResult:
    """Time the forward scan at each length and fit a log-log slope.

    Lengths must be ascending and at least two; each entry is the median
    over ``repeats`` interleaved rounds.
    """
    if len(lengths) < 2 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("scan_complexity_probe: need >= 2 ascending lengths")
    medians = interleaved_scan_medians([(L, d_inner, n_state) for L in lengths],
                                       repeats, seed)
    rows = [ProbeRow(L, m) for L, m in zip(lengths, medians)]
    xs = np.log([r.length for r in rows])
    ys = np.log([r.median_seconds for r in rows])
    slope = float(np.polyfit(xs, ys, 1)[0])
    return ProbeResult(rows, slope)
