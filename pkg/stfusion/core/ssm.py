"""
Selective-scan state space primitive and the visual state space (VSS) block.

Sequences are channel-first, (N, D, L). The recurrence per channel d and state s:

    h_t = exp(delta_t * A) h_{t-1} + delta_t * B_t * x_t
    y_t = C_t . h_t + D_skip * x_t

with h_0 = 0 and delta, B, C computed from the input tokens.
"""
from __future__ import annotations

import numpy as np

from stfusion.core.entities import DimensionError, DomainError
from stfusion.core.layers import Conv2dParams, LayerNormParams, conv2d, linear, norm
from stfusion.core.params import ParamsModel, constant_init, parameter, uniform_init
from stfusion.core.tensor import Function, Tensor

SCAN_DIRECTIONS = 4


class SelectiveScan(Function):
    # state updates performed by forward passes, for complexity accounting
    state_updates = 0

    def forward(self, x, delta, A, B, C, D):
        if x.ndim != 3 or x.shape[2] < 1:
            raise DimensionError(f"selective scan expects (N, D, L) with L >= 1, got {x.shape}")
        n, d, length = x.shape
        s = A.shape[1]
        if delta.shape != x.shape or A.shape[0] != d or B.shape != (n, s, length) or C.shape != B.shape:
            raise DimensionError(
                f"selective scan shapes disagree: x {x.shape}, delta {delta.shape}, A {A.shape}, B {B.shape}, C {C.shape}"
            )
        for name, value in (("x", x), ("delta", delta), ("A", A), ("B", B), ("C", C), ("D_skip", D)):
            if not np.all(np.isfinite(value)):
                raise DomainError(f"selective scan received non-finite {name}")
        self.x, self.delta, self.A, self.B, self.C, self.D = x, delta, A, B, C, D
        self.decay = np.exp(np.moveaxis(delta, 2, 0)[..., None] * A)
        self.states = np.empty((length, n, d, s), dtype=x.dtype)
        h = np.zeros((n, d, s), dtype=x.dtype)
        y = np.empty_like(x)
        for t in range(length):
            h = self.decay[t] * h + (delta[:, :, t] * x[:, :, t])[:, :, None] * B[:, None, :, t]
            self.states[t] = h
            y[:, :, t] = (h * C[:, None, :, t]).sum(axis=-1)
            SelectiveScan.state_updates += n * d * s
        return y + D[None, :, None] * x

    def backward(self, grad):
        x, delta, A, B, C, D = self.x, self.delta, self.A, self.B, self.C, self.D
        length = x.shape[2]
        gx = D[None, :, None] * grad
        gD = (grad * x).sum(axis=(0, 2))
        gdelta = np.zeros_like(delta)
        gA = np.zeros_like(A)
        gB = np.zeros_like(B)
        gC = np.zeros_like(C)
        gh = np.zeros_like(self.states[0])
        for t in reversed(range(length)):
            gy = grad[:, :, t]
            gC[:, :, t] = (gy[:, :, None] * self.states[t]).sum(axis=1)
            gh = gh + gy[:, :, None] * C[:, None, :, t]
            if t > 0:
                through_decay = gh * self.states[t - 1] * self.decay[t]
                gdelta[:, :, t] += (through_decay * A).sum(axis=-1)
                gA += (through_decay * delta[:, :, t, None]).sum(axis=0)
            gB[:, :, t] = (gh * (delta[:, :, t] * x[:, :, t])[:, :, None]).sum(axis=1)
            g_input = (gh * B[:, None, :, t]).sum(axis=-1)
            gdelta[:, :, t] += g_input * x[:, :, t]
            gx[:, :, t] += g_input * delta[:, :, t]
            gh = gh * self.decay[t]
        return gx, gdelta, gA, gB, gC, gD


def scan_recurrence(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D_skip: Tensor) -> Tensor:
    """Run the recurrence with explicitly given (possibly frozen) delta, A, B, C."""
    return SelectiveScan.apply(x, delta, A, B, C, D_skip)


class ScanParams(ParamsModel):
    x_proj_weight: Tensor
    dt_proj_weight: Tensor
    dt_bias: Tensor
    A_log: Tensor
    D_skip: Tensor

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        channels: int,
        d_state: int = 16,
        dt_rank: int = 1,
        dt_min: float = 0.01,
        dt_max: float = 0.1,
    ) -> "ScanParams":
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
        # inverse softplus so that softplus(dt_bias) == dt at init
        dt_bias = dt + np.log(-np.expm1(-dt))
        a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (channels, 1)))
        return cls(
            x_proj_weight=uniform_init(rng, (dt_rank + 2 * d_state, channels), channels),
            dt_proj_weight=uniform_init(rng, (channels, dt_rank), dt_rank),
            dt_bias=parameter(dt_bias),
            A_log=parameter(a_log),
            D_skip=constant_init((channels,), 1.0),
        )

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj_weight.shape[1]


def scan_inputs(x: Tensor, p: ScanParams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Input-dependent delta (N, D, L), B and C (N, S, L), and A = -exp(A_log)."""
    r, s = p.dt_rank, p.d_state
    projected = linear(x, p.x_proj_weight)
    dt, B, C = projected[:, :r], projected[:, r : r + s], projected[:, r + s :]
    delta = linear(dt, p.dt_proj_weight, p.dt_bias).softplus()
    return delta, -(p.A_log.exp()), B, C


def selective_scan_1d(x: Tensor, p: ScanParams) -> Tensor:
    delta, A, B, C = scan_inputs(x, p)
    return SelectiveScan.apply(x, delta, A, B, C, p.D_skip)


def cross_scan_2d(x: Tensor, scans: list[ScanParams]) -> Tensor:
    """Scan row-major forward/backward and column-major forward/backward, then sum."""
    if len(scans) != SCAN_DIRECTIONS:
        raise DimensionError(f"cross scan needs {SCAN_DIRECTIONS} parameter sets, got {len(scans)}")
    n, d, h, w = x.shape
    rows = x.reshape(n, d, h * w)
    cols = x.permute(0, 1, 3, 2).reshape(n, d, h * w)
    row_fwd = selective_scan_1d(rows, scans[0])
    row_bwd = selective_scan_1d(rows.flip(2), scans[1]).flip(2)
    col_fwd = selective_scan_1d(cols, scans[2])
    col_bwd = selective_scan_1d(cols.flip(2), scans[3]).flip(2)
    from_rows = (row_fwd + row_bwd).reshape(n, d, h, w)
    from_cols = (col_fwd + col_bwd).reshape(n, d, w, h).permute(0, 1, 3, 2)
    return from_rows + from_cols


class VssBlockParams(ParamsModel):
    norm: LayerNormParams
    in_proj: Tensor
    conv: Conv2dParams
    scans: list[ScanParams]
    gate_proj: Tensor
    out_proj: Tensor

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        channels: int,
        d_state: int = 16,
        expand: int = 2,
        dt_rank: int | None = None,
    ) -> "VssBlockParams":
        inner = expand * channels
        rank = dt_rank if dt_rank is not None else max(1, -(-channels // 16))
        return cls(
            norm=LayerNormParams.create(channels),
            in_proj=uniform_init(rng, (inner, channels), channels),
            conv=Conv2dParams.create(rng, inner, inner, 3, padding=1, groups=inner),
            scans=[ScanParams.create(rng, inner, d_state, rank) for _ in range(SCAN_DIRECTIONS)],
            gate_proj=uniform_init(rng, (inner, channels), channels),
            out_proj=uniform_init(rng, (channels, inner), inner),
        )

    @property
    def channels(self) -> int:
        return self.in_proj.shape[1]


def vss_block(x: Tensor, p: VssBlockParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"vss block expects {p.channels} channels, got input {x.shape}")
    u = norm(x, p.norm)
    branch = conv2d(linear(u, p.in_proj), p.conv).silu()
    scanned = cross_scan_2d(branch, p.scans)
    gate = linear(u, p.gate_proj).silu()
    return x + linear(scanned * gate, p.out_proj)
