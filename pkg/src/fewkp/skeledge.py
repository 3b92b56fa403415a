"""Differentiable skeleton edge maps.

Each linked pair (k_i, k_j) is drawn as a Gaussian ridge along the segment,
modulated by the keypoint uncertainties propagated along the edge.  The map
is the per-pixel max over edges times a shared positive weight alpha.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geom import pixel_grid, point_to_segment
from .skeleton import Skeleton

# values beyond this many sigmas from every edge are exactly zero
CUTOFF_SIGMAS = 5.0


class EdgeVariant(str, enum.Enum):
    MULTIPLICATIVE = "multiplicative"  # u * exp(-d^2 / sigma^2)
    EXPONENT_SIGNED = "exponent_signed"  # exp(-u * d^2 / sigma^2)


@dataclass
class EdgeParams:
    theta: Tensor
    gamma: Tensor
    variant: EdgeVariant = EdgeVariant.MULTIPLICATIVE

    @classmethod
    def init(cls, variant=EdgeVariant.MULTIPLICATIVE, theta: float = 1.0, gamma: float = -4.0):
        return cls(
            Tensor(np.array(theta), requires_grad=True, name="edge.theta"),
            Tensor(np.array(gamma), requires_grad=True, name="edge.gamma"),
            EdgeVariant(variant),
        )


def sigma_sq(theta):
    """sigma^2 = 1 / (1000 exp(theta)); float in, float out, Tensor keeps the graph."""
    if isinstance(theta, Tensor):
        return dc.exp(dc.mul(theta, -1.0)) * 1e-3
    return float(np.exp(-theta) / 1000.0)


def alpha(gamma):
    if isinstance(gamma, Tensor):
        return dc.softplus(gamma)
    return float(np.logaddexp(0.0, gamma))


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def propagate_uncertainty(t, v_i, v_j):
    """sigmoid of the uncertainty logit interpolated along the edge at t."""
    tc = np.clip(t, 0.0, 1.0)
    return _sig((1.0 - tc) * v_i + tc * v_j)


def render_edge(k_i, k_j, v_i, v_j, params: EdgeParams, h: int, w: int) -> np.ndarray:
    """Single-edge map S_ij on an H x W grid (numpy, no alpha, no cutoff)."""
    grid = pixel_grid(h, w)
    d, t = point_to_segment(grid, np.asarray(k_i, float), np.asarray(k_j, float))
    u = propagate_uncertainty(t, v_i, v_j)
    s2 = sigma_sq(float(params.theta.data))
    if EdgeVariant(params.variant) is EdgeVariant.MULTIPLICATIVE:
        out = u * np.exp(-(d**2) / s2)
    else:
        out = np.exp(-u * d**2 / s2)
    return out.reshape(h, w)


def render_skeleton(
    points,
    logits,
    edges,
    params: EdgeParams,
    h: int,
    w: int,
    uncertainty: bool = True,
) -> Tensor:
    """Edge map S(p) = alpha * max_ij S_ij(p).

    ``points`` (N, K, 2) or (K, 2), ``logits`` (N, K) or (K,); either may be a
    Tensor.  Returns a Tensor of shape (N, H, W) (or (H, W) for unbatched input).
    Gradient flows through the per-pixel winning edge only (ties: lowest edge
    index).  ``uncertainty=False`` replaces every propagated sigmoid by 1.
    """
    if isinstance(edges, Skeleton):
        edges = edges.edges
    edges = np.asarray(edges, dtype=int).reshape(-1, 2)
    if len(edges) == 0:
        raise ValueError("render_skeleton: empty edge list")
    points, logits = dc.as_tensor(points), dc.as_tensor(logits)
    unbatched = points.ndim == 2
    if unbatched:
        points = dc.reshape(points, (1,) + points.shape)
        logits = dc.reshape(logits, (1,) + logits.shape)
    s_map = _EdgeMapOp(points, logits, edges, params, h, w, uncertainty).run()
    out = s_map * alpha(params.gamma)
    return dc.reshape(out, (h, w)) if unbatched else out


class _EdgeMapOp:
    """Fused forward/backward for the max-aggregated edge map (before alpha)."""

    def __init__(self, points: Tensor, logits: Tensor, edges, params, h, w, uncertainty):
        self.points, self.logits, self.theta = points, logits, params.theta
        self.edges, self.h, self.w = edges, h, w
        self.variant = EdgeVariant(params.variant)
        self.uncertainty = uncertainty

    def run(self) -> Tensor:
        kp, v = self.points.data, self.logits.data
        n = kp.shape[0]
        grid = pixel_grid(self.h, self.w)  # (P, 2)
        ei, ej = self.edges[:, 0], self.edges[:, 1]
        a = kp[:, ei]  # (N, E, 2)
        ab = kp[:, ej] - a
        denom = np.maximum((ab * ab).sum(-1), 1e-24)  # (N, E)
        # t = ((p - a) . ab) / |ab|^2, split so the (N, E, P) work is one matmul;
        # the (N, E, P) arrays below are updated in place to keep allocations down
        t = ab @ grid.T
        t -= (a * ab).sum(-1)[..., None]
        t /= denom[..., None]
        tc = np.clip(t, 0.0, 1.0)
        dx = tc * ab[..., 0, None]
        dx += a[..., 0, None]
        np.subtract(grid[:, 0], dx, out=dx)
        dy = tc * ab[..., 1, None]
        dy += a[..., 1, None]
        np.subtract(grid[:, 1], dy, out=dy)
        d2 = np.square(dx, out=dx)
        d2 += np.square(dy, out=dy)
        del dy
        s2 = sigma_sq(float(self.theta.data))
        dead = d2 > (CUTOFF_SIGMAS**2) * s2
        u = None
        if self.uncertainty:
            # sigmoid((1 - tc) v_i + tc v_j) = (1 + tanh(z / 2)) / 2
            vi = v[:, ei, None]
            u = tc * (v[:, ej, None] - vi)
            u += vi
            u *= 0.5
            np.tanh(u, out=u)
            u += 1.0
            u *= 0.5
        s = np.multiply(d2, -1.0 / s2)
        if self.variant is EdgeVariant.EXPONENT_SIGNED and u is not None:
            s *= u
        # live exponents are >= -CUTOFF^2; clamping the rest avoids slow underflow
        np.maximum(s, -(CUTOFF_SIGMAS**2) - 1.0, out=s)
        np.exp(s, out=s)
        if self.variant is EdgeVariant.MULTIPLICATIVE and u is not None:
            s *= u
        s[dead] = 0.0
        del tc, d2, u, dead
        # running argmax over edges; strict '>' keeps the lowest index on ties
        win = np.zeros((n, s.shape[2]), dtype=np.intp)
        best = s[:, 0].copy()
        for e in range(1, s.shape[1]):
            better = s[:, e] > best
            win[better] = e
            np.maximum(best, s[:, e], out=best)
        sel = win[:, None, :]
        out = best
        t_w = np.take_along_axis(t, sel, axis=1)[:, 0]
        del s, t
        # the rest is cheap to recompute for the winning edge alone
        a_w = np.take_along_axis(a, win[..., None], axis=1)  # (N, P, 2)
        ab_w = np.take_along_axis(ab, win[..., None], axis=1)
        tc_w = np.clip(t_w, 0.0, 1.0)
        dx_w = grid[None, :, 0] - (a_w[..., 0] + tc_w * ab_w[..., 0])
        dy_w = grid[None, :, 1] - (a_w[..., 1] + tc_w * ab_w[..., 1])
        d2_w = dx_w * dx_w + dy_w * dy_w
        if self.uncertainty:
            rows = np.arange(n)[:, None]
            u_w = _sig((1.0 - tc_w) * v[rows, ei[win]] + tc_w * v[rows, ej[win]])
        else:
            u_w = np.ones_like(t_w)
        self.saved = dict(
            win=win,
            t=t_w,
            tc=tc_w,
            dx=dx_w,
            dy=dy_w,
            d2=d2_w,
            u=u_w,
            gauss=np.exp(-d2_w / s2) if self.variant is EdgeVariant.MULTIPLICATIVE else None,
            s=out,
            live=d2_w <= (CUTOFF_SIGMAS**2) * s2,
            denom=np.take_along_axis(denom, win, axis=1),
            a=a_w,
            ab=ab_w,
        )
        self.s2, self.n = s2, n
        return dc._make(
            "edge_map", out.reshape(n, self.h, self.w), (self.points, self.logits, self.theta), self._backward
        )

    def _backward(self, g_out: np.ndarray):
        sv, s2, n = self.saved, self.s2, self.n
        g = g_out.reshape(n, -1) * sv["live"]
        win = sv["win"]
        ei, ej = self.edges[win, 0], self.edges[win, 1]  # (N, P)
        rows = np.broadcast_to(np.arange(n)[:, None], ei.shape)
        u, d2, s = sv["u"], sv["d2"], sv["s"]
        if self.variant is EdgeVariant.MULTIPLICATIVE:
            ds_du = sv["gauss"]
            ds_dd2 = -s / s2
            ds_ds2 = s * d2 / (s2 * s2)
        else:
            ds_du = -s * d2 / s2
            ds_dd2 = -s * u / s2
            ds_ds2 = s * u * d2 / (s2 * s2)
        g_d2 = g * ds_dd2
        # s2 = 1e-3 exp(-theta)
        g_theta = np.array(-(g * ds_ds2).sum() * s2)

        dx, dy, tc, t = sv["dx"], sv["dy"], sv["tc"], sv["t"]
        # d2 = |p - (1 - tc) a - tc b|^2; its t-derivative vanishes inside the
        # segment (projection) and tc is constant outside, so t only enters via u
        ga_x, ga_y = -2.0 * dx * (1.0 - tc), -2.0 * dy * (1.0 - tc)
        gb_x, gb_y = -2.0 * dx * tc, -2.0 * dy * tc

        g_v = None
        g_t = 0.0
        if self.uncertainty:
            dz = g * ds_du * u * (1.0 - u)
            vi = self.logits.data[rows, ei]
            vj = self.logits.data[rows, ej]
            kk = self.logits.shape[1]
            g_v = _scatter(rows * kk + ei, dz * (1.0 - tc), n * kk)
            g_v += _scatter(rows * kk + ej, dz * tc, n * kk)
            g_v = g_v.reshape(n, kk)
            g_t = dz * (vj - vi) * ((t > 0.0) & (t < 1.0))

        # t = (p - a).(b - a) / |b - a|^2
        grid = pixel_grid(self.h, self.w)
        denom = sv["denom"]
        a, ab = sv["a"], sv["ab"]
        pa_x, pa_y = grid[None, :, 0] - a[..., 0], grid[None, :, 1] - a[..., 1]
        dtdb_x = (pa_x - 2.0 * t * ab[..., 0]) / denom
        dtdb_y = (pa_y - 2.0 * t * ab[..., 1]) / denom
        dtda_x = -dtdb_x - ab[..., 0] / denom
        dtda_y = -dtdb_y - ab[..., 1] / denom

        kk = self.points.shape[1]
        fi, fj = (rows * kk + ei) * 2, (rows * kk + ej) * 2
        m = n * kk * 2
        g_pts = (
            _scatter(fi, g_d2 * ga_x + g_t * dtda_x, m)
            + _scatter(fi + 1, g_d2 * ga_y + g_t * dtda_y, m)
            + _scatter(fj, g_d2 * gb_x + g_t * dtdb_x, m)
            + _scatter(fj + 1, g_d2 * gb_y + g_t * dtdb_y, m)
        )
        return g_pts.reshape(self.points.shape), g_v, g_theta


def _scatter(flat_idx, values, size):
    return np.bincount(flat_idx.ravel(), weights=values.ravel(), minlength=size)
