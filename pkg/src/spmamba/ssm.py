"""Selective state-space scanning.

The continuous system ``h' = A h + B x, y = C h`` is discretised with a
zero-order hold per step, with ``Δ``, ``B`` and ``C`` computed from the
current input token while ``A`` stays a learned, input-independent,
strictly negative diagonal.  The recurrence itself runs sequentially; the
only vectorisation is across batch, channel and state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from . import tensor as T
from .errors import DimensionError, StabilityError
from .nn import Module, param
from .tensor import Tensor, _node

SMALL_DA = 1e-8


# ---------------------------------------------------------------------------
# Zero-order hold
# ---------------------------------------------------------------------------

def zoh_factor(a, delta, em1=None):
    """``(exp(Δa) - 1) / a``, the multiplier turning ``b`` into ``b̄``.

    Uses ``expm1`` to avoid cancellation and the series ``Δ(1 + Δa/2)`` when
    ``|Δa| < 1e-8``.  ``em1`` may carry a precomputed ``expm1(Δa)``.
    """
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    x = delta * a
    if em1 is None:
        em1 = np.expm1(x)
    small = np.abs(x) < SMALL_DA
    if not small.any():
        return em1 / a
    phi = np.asarray(em1 / np.where(small, -1.0, a))
    phi[small] = (np.broadcast_to(delta, x.shape) * (1.0 + 0.5 * x))[small]
    return phi


def _zoh_factor_da(a, delta, em1=None):
    """∂/∂a of :func:`zoh_factor`."""
    x = delta * a
    if em1 is None:
        em1 = np.expm1(x)
    small = np.abs(x) < 1e-3
    out = np.asarray((x * (em1 + 1.0) - em1) / (a * a))
    if small.any():
        d = np.broadcast_to(delta, x.shape)[small]
        xs = x[small]
        out[small] = d * d * (0.5 + xs * (1 / 3 + xs * (1 / 8 + xs * (1 / 30 + xs / 144))))
    return out


def discretize_zoh(a, b, delta, checked: bool = True):
    """Return ``(ā, b̄)`` for the diagonal system ``h' = a h + b x`` held over a step ``delta``."""
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise ValueError("delta must be non-negative")
    if checked and np.any(a >= 0):
        raise StabilityError("state matrix entries must be strictly negative")
    a_bar = np.exp(delta * a)
    b_bar = zoh_factor(a, delta) * np.asarray(b, dtype=np.float64)
    if a_bar.ndim == 0:
        return float(a_bar), float(b_bar)
    return a_bar, b_bar


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass
class SSMChannelParams:
    a_log: Tensor  # (C, S); A = -exp(a_log)
    d_skip: Tensor  # (C,)

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[1]

    def state_matrix(self) -> Tensor:
        return -T.exp(self.a_log)


@dataclass
class SelectiveProjection:
    w_delta: Tensor  # (C, C)
    b_delta: Tensor  # (C,)
    w_B: Tensor  # (S, C)
    w_C: Tensor  # (S, C)


@dataclass
class DiscreteStep:
    a_bar: np.ndarray  # (C, S)
    b_bar_x: np.ndarray  # (C, S)
    c_t: np.ndarray  # (C, S)


def init_ssm_params(channels: int, state_dim: int, rng: np.random.Generator,
                    dt_min: float = 1e-3, dt_max: float = 1e-1) -> tuple[SSMChannelParams, SelectiveProjection]:
    a_log = np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1)))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
    bound = 1.0 / np.sqrt(channels)
    params = SSMChannelParams(param(a_log), param(np.ones(channels)))
    proj = SelectiveProjection(
        w_delta=param(rng.uniform(-bound, bound, (channels, channels))),
        b_delta=param(np.log(np.expm1(dt))),  # softplus^-1(dt)
        w_B=param(rng.uniform(-bound, bound, (state_dim, channels))),
        w_C=param(rng.uniform(-bound, bound, (state_dim, channels))),
    )
    return params, proj


# ---------------------------------------------------------------------------
# Scans
# ---------------------------------------------------------------------------

def linear_recurrence(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``h_t = a_t * h_{t-1} + u_t`` along axis 1 with ``h_{-1} = 0``; returns every ``h_t``."""
    hs = np.empty_like(u)
    h = np.zeros(u.shape[:1] + u.shape[2:])
    for t in range(u.shape[1]):
        h = a[:, t] * h + u[:, t]
        hs[:, t] = h
    return hs


def scan_discrete(a_bar: np.ndarray, b_bar_x: np.ndarray, c: np.ndarray, d_skip: np.ndarray,
                  x: np.ndarray) -> np.ndarray:
    """Run the discrete recurrence on precomputed steps.

    ``a_bar``, ``b_bar_x``, ``c``: (L, C, S); ``x``: (L, C); returns y (L, C).
    """
    hs = linear_recurrence(a_bar[None], b_bar_x[None])[0]
    return (hs * c).sum(axis=-1) + d_skip * x


@numba.njit(cache=True)
def _phi(a, delta, em1):
    x = delta * a
    if abs(x) < SMALL_DA:
        return delta * (1.0 + 0.5 * x)
    return em1 / a


@numba.njit(cache=True)
def _dphi_da(a, delta, em1):
    x = delta * a
    if abs(x) < 1e-3:
        return delta * delta * (0.5 + x * (1 / 3 + x * (1 / 8 + x * (1 / 30 + x / 144))))
    return (x * (em1 + 1.0) - em1) / (a * a)


@numba.njit(cache=True)
def _scan_forward(x, delta, A, Bm, Cm, D):
    # time outermost so every inner loop walks contiguous (channel, state) memory
    nb, L, C = x.shape
    S = A.shape[1]
    y = np.empty((nb, L, C))
    hs = np.empty((nb, L, C, S))
    em1s = np.empty((nb, L, C, S))
    h = np.zeros((C, S))
    for b in range(nb):
        h[:] = 0.0
        for t in range(L):
            for c in range(C):
                d = delta[b, t, c]
                xv = x[b, t, c]
                acc = D[c] * xv
                for s in range(S):
                    a = A[c, s]
                    em1 = np.expm1(d * a)
                    em1s[b, t, c, s] = em1
                    hv = (em1 + 1.0) * h[c, s] + _phi(a, d, em1) * Bm[b, t, s] * xv
                    h[c, s] = hv
                    hs[b, t, c, s] = hv
                    acc += Cm[b, t, s] * hv
                y[b, t, c] = acc
    return y, (hs, em1s)


@numba.njit(cache=True)
def _scan_backward(gy, x, delta, A, Bm, Cm, D, saved):
    hs, em1s = saved
    nb, L, C = x.shape
    S = A.shape[1]
    gx = np.empty_like(x)
    gdelta = np.empty_like(delta)
    gA = np.zeros_like(A)
    gB = np.zeros_like(Bm)
    gC = np.zeros_like(Cm)
    gD = np.zeros_like(D)
    # carry[c, s] = a_bar[t + 1] * dL/dh[t + 1]
    carry = np.zeros((C, S))
    for b in range(nb):
        carry[:] = 0.0
        for t in range(L - 1, -1, -1):
            for c in range(C):
                d = delta[b, t, c]
                xv = x[b, t, c]
                g = gy[b, t, c]
                gD[c] += g * xv
                gxv = g * D[c]
                gdv = 0.0
                for s in range(S):
                    a = A[c, s]
                    em1 = em1s[b, t, c, s]
                    a_bar = em1 + 1.0
                    phi = _phi(a, d, em1)
                    acc = g * Cm[b, t, s] + carry[c, s]
                    carry[c, s] = a_bar * acc
                    h_prev = hs[b, t - 1, c, s] if t > 0 else 0.0
                    bx = Bm[b, t, s] * xv
                    gC[b, t, s] += g * hs[b, t, c, s]
                    gxv += acc * phi * Bm[b, t, s]
                    gB[b, t, s] += acc * phi * xv
                    gdv += acc * a_bar * (h_prev * a + bx)
                    gA[c, s] += acc * (h_prev * a_bar * d + bx * _dphi_da(a, d, em1))
                gx[b, t, c] = gxv
                gdelta[b, t, c] = gdv
    return gx, gdelta, gA, gB, gC, gD


def _scan_forward_numpy(xd, dd, Ad, Bd, Cd, Dd):
    delta4 = dd[..., None]
    em1 = np.expm1(delta4 * Ad)
    bx = Bd[:, :, None, :] * xd[..., None]
    hs = linear_recurrence(em1 + 1.0, zoh_factor(Ad, delta4, em1) * bx)
    return np.einsum("blcs,bls->blc", hs, Cd) + Dd * xd, hs


def _scan_backward_numpy(gy, xd, dd, Ad, Bd, Cd, Dd, hs):
    delta4 = dd[..., None]
    em1 = np.expm1(delta4 * Ad)
    a_bar = em1 + 1.0
    phi = zoh_factor(Ad, delta4, em1)
    bx = Bd[:, :, None, :] * xd[..., None]
    gh = gy[..., None] * Cd[:, :, None, :]
    G = np.empty_like(gh)
    acc = gh[:, -1]
    G[:, -1] = acc
    for t in range(gh.shape[1] - 2, -1, -1):
        acc = gh[:, t] + a_bar[:, t + 1] * acc
        G[:, t] = acc
    h_prev = np.empty_like(hs)
    h_prev[:, 0] = 0.0
    h_prev[:, 1:] = hs[:, :-1]
    Gphi = G * phi
    Ga = G * a_bar
    gx = gy * Dd + np.einsum("blcs,bls->blc", Gphi, Bd)
    gdelta = np.einsum("blcs,cs->blc", Ga * h_prev, Ad) + np.einsum("blcs,blcs->blc", Ga, bx)
    gA = (np.einsum("blcs,blc->cs", Ga * h_prev, dd)
          + np.einsum("blcs,blcs->cs", G * bx, _zoh_factor_da(Ad, delta4, em1)))
    gB = np.einsum("blcs,blc->bls", Gphi, xd)
    gC = np.einsum("blc,blcs->bls", gy, hs)
    gD = (gy * xd).sum(axis=(0, 1))
    return gx, gdelta, gA, gB, gC, gD


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor,
                   backend: str = "compiled") -> Tensor:
    """Fused selective scan over (batch, length, channel) sequences.

    x, delta: (Bt, L, C); A: (C, S); B, C: (Bt, L, S); D: (C,).  The
    ``"compiled"`` backend runs the recurrence in a JIT-compiled loop; the
    ``"numpy"`` backend is the vectorised reference over batch, channel and
    state with a Python loop over time.
    """
    if x.ndim != 3:
        raise DimensionError(f"selective_scan expects (batch, length, channels), got {x.shape}")
    xd, dd, Ad, Bd, Cd, Dd = x.data, delta.data, A.data, B.data, C.data, D.data
    if T.is_checked() and np.any(Ad >= 0):
        raise StabilityError("state matrix entries must be strictly negative")
    fwd, bwd = (_scan_forward, _scan_backward) if backend == "compiled" else (_scan_forward_numpy, _scan_backward_numpy)
    y, hs = fwd(xd, dd, Ad, Bd, Cd, Dd)

    def bw(gy):
        return bwd(np.ascontiguousarray(gy), xd, dd, Ad, Bd, Cd, Dd, hs)

    return _node(y, (x, delta, A, B, C, D), bw, "selective_scan")


def selective_project(x_seq: Tensor, proj: SelectiveProjection) -> tuple[Tensor, Tensor, Tensor]:
    """Per-step ``(Δ_t, B_t, C_t)``; ``Δ_t`` is softplus-activated and so strictly positive."""
    delta = T.softplus(T.linear(x_seq, proj.w_delta, proj.b_delta))
    return delta, T.linear(x_seq, proj.w_B), T.linear(x_seq, proj.w_C)


def ssm_scan(x_seq: Tensor, params: SSMChannelParams, proj: SelectiveProjection) -> Tensor:
    """Selective scan of an (L, C) or (batch, L, C) sequence; same shape out."""
    squeeze = x_seq.ndim == 2
    if squeeze:
        x_seq = T.reshape(x_seq, (1,) + x_seq.shape)
    if x_seq.ndim != 3:
        raise DimensionError(f"ssm_scan expects (L, C) or (batch, L, C), got {x_seq.shape}")
    if x_seq.shape[-1] != params.a_log.shape[0]:
        raise DimensionError(f"sequence has {x_seq.shape[-1]} channels, params expect {params.a_log.shape[0]}")
    delta, B, C = selective_project(x_seq, proj)
    y = T.fault_point(selective_scan(x_seq, delta, params.state_matrix(), B, C, params.d_skip), "ssm_scan")
    return T.reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# Four-route 2-D scan
# ---------------------------------------------------------------------------

ROUTES = ("row", "row_reversed", "col", "col_reversed")


def route_sequences(x: Tensor) -> list[Tensor]:
    """Flatten an NCHW map into four (N, H·W, C) sequences, one per scan route."""
    n, c, h, w = x.shape
    rows = T.transpose(T.reshape(x, (n, c, h * w)), (0, 2, 1))
    cols = T.transpose(T.reshape(T.transpose(x, (0, 1, 3, 2)), (n, c, h * w)), (0, 2, 1))
    return [rows, T.flip(rows, 1), cols, T.flip(cols, 1)]


def sequences_to_grid(seqs: Sequence[Tensor], h: int, w: int) -> list[Tensor]:
    """Inverse of :func:`route_sequences`, applied route by route."""
    rows, rows_rev, cols, cols_rev = seqs
    n, _, c = rows.shape

    def from_rows(s):
        return T.reshape(T.transpose(s, (0, 2, 1)), (n, c, h, w))

    def from_cols(s):
        return T.transpose(T.reshape(T.transpose(s, (0, 2, 1)), (n, c, w, h)), (0, 1, 3, 2))

    return [from_rows(rows), from_rows(T.flip(rows_rev, 1)), from_cols(cols), from_cols(T.flip(cols_rev, 1))]


def ss2d_scan(x: Tensor, params: SSMChannelParams | Sequence[SSMChannelParams],
              proj: SelectiveProjection | Sequence[SelectiveProjection]) -> Tensor:
    """Scan an NCHW map along four routes and merge by summation in fixed route order.

    Passing a single parameter set shares it across routes; passing four
    gives each route its own.
    """
    if x.ndim != 4:
        raise DimensionError(f"ss2d_scan expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    seqs = route_sequences(x)
    if isinstance(params, SSMChannelParams):
        stacked = ssm_scan(T.concat(seqs, axis=0), params, proj)
        outs = T.split(stacked, [n] * 4, axis=0)
    else:
        outs = [ssm_scan(s, p, q) for s, p, q in zip(seqs, params, proj)]
    grids = sequences_to_grid(outs, h, w)
    y = grids[0]
    for g in grids[1:]:
        y = y + g
    return y


class SelectiveSSM(Module):
    """Owns the SSM parameters for one SS2D unit (shared or per-route)."""

    def __init__(self, channels: int, state_dim: int, rng: np.random.Generator, share_routes: bool = True):
        self.share_routes = share_routes
        n_sets = 1 if share_routes else 4
        sets = [init_ssm_params(channels, state_dim, rng) for _ in range(n_sets)]
        self.a_log = [s[0].a_log for s in sets]
        self.d_skip = [s[0].d_skip for s in sets]
        self.w_delta = [s[1].w_delta for s in sets]
        self.b_delta = [s[1].b_delta for s in sets]
        self.w_B = [s[1].w_B for s in sets]
        self.w_C = [s[1].w_C for s in sets]

    def param_sets(self) -> tuple[list[SSMChannelParams], list[SelectiveProjection]]:
        ps = [SSMChannelParams(a, d) for a, d in zip(self.a_log, self.d_skip)]
        qs = [SelectiveProjection(*q) for q in zip(self.w_delta, self.b_delta, self.w_B, self.w_C)]
        return ps, qs

    def forward(self, x: Tensor) -> Tensor:
        ps, qs = self.param_sets()
        if self.share_routes:
            return ss2d_scan(x, ps[0], qs[0])
        return ss2d_scan(x, ps, qs)
