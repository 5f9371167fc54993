"""Exact sampling of the interlacement set restricted to a finite window.

The cloud of trajectories meeting a finite window K at level u is Poisson
with intensity u * cap(K); each trajectory enters K at a site drawn from the
normalized equilibrium measure and then runs as an unconditioned simple
random walk forever.  Occupancy only needs the trace on K, which admits two
exact realizations:

* chain mode (default for moderate windows).  The successive K-visits of a
  walk form a Markov chain on K with substochastic kernel Q = I - G^{-1}
  (G the Green matrix of K) whose defect Q 1 = 1 - e_K is exactly the
  escape probability.  Sampling the visit chain integrates the walk out
  entirely: no steps are simulated, and termination is built in.

* walk mode (large planar windows, where G^{-1} does not fit in memory).
  The walk is simulated step by step inside an escape box around the
  window; at the first exit a Bernoulli draw with the exact hitting
  probability h(x) = sum_y g(x-y) e_K(y) decides whether the path ever
  meets K again.  A returning walk is reproduced by a retry ladder of free
  attempts between doubling spheres (each attempt is accepted on entering
  K, promoted outward with probability h, or rejected wholesale); because
  rejection costs grow with distance, the ladder is capped after a few
  levels and the re-entry site is then drawn from its exact law
  eps_x ( . ) proportional to G^{-1} g( . - x), computed per event by a
  circulant-preconditioned conjugate-gradient solve with the Toeplitz
  Green operator.  Every ingredient is exact; no truncation bias anywhere.

h values on the escape-box surface are precomputed by FFT convolution of
the equilibrium weights with Green slices, so the per-exit cost is a
lookup.  Level labels are iid uniform on (0, u_max], which realizes the
nested thinning property: occupancy at u' <= u is the label-filtered
sub-cloud, monotone by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import fft as sfft
from scipy.linalg.lapack import dpotrf, dpotri

from .equilibrium import EquilibriumMeasure, equilibrium_measure, green_matrix
from .geometry import Window
from .green import GreenTable, h_exact_sum
from .rng import RngStream, next_double, next_uint32_below

_STATUS_DONE = 0
_STATUS_BAIL = 4
_STEP_GUARD = np.int64(1) << np.int64(40)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _chain_trajectory(state, inc, start_row, q_cum, site_idx,
                      visits, nv0, stamp, traj_id):
    """Follow one window-visit chain; q_cum rows are cumulative Q(y, .)."""
    nv = nv0
    row = start_row
    while True:
        idx = site_idx[row]
        if stamp[idx] != traj_id:
            stamp[idx] = traj_id
            visits[nv] = idx
            nv += 1
        state, u = next_double(state, inc)
        total = q_cum[row, q_cum.shape[1] - 1]
        if u >= total:
            return state, nv
        lo = 0
        hi = q_cum.shape[1]
        while lo < hi:
            mid = (lo + hi) // 2
            if q_cum[row, mid] <= u:
                lo = mid + 1
            else:
                hi = mid
        row = lo


@njit(cache=True)
def _walk_trajectory(state, inc, pos,
                     win_lo, win_shape, win_strides, win_mask,
                     center, r_esc, use_h, bail_level, use_faces, hfaces,
                     use_rung_faces, hfaces_rung,
                     eq_pts, eq_w,
                     table, trange, tstride, coef, a_d, dm2h,
                     visits, nv0, stamp, traj_id, bail_pos):
    """Walk one trajectory from pos (a window site) until certified escape.

    Returns (state, nv, status); on status BAIL the promoted ladder base is
    in bail_pos and the caller resumes the trajectory at an exact re-entry
    site.  Window visits are appended to visits with stamp deduplication.
    """
    d = pos.shape[0]
    twod = np.uint32(2 * d)
    nv = nv0
    idx = 0
    for k in range(d):
        idx += (pos[k] - win_lo[k]) * win_strides[k]
    if stamp[idx] != traj_id:
        stamp[idx] = traj_id
        visits[nv] = idx
        nv += 1
    in_ladder = False
    level = 0
    ladder_r = np.int64(0)
    ladder_base = np.empty(d, np.int64)
    steps = np.int64(0)
    while True:
        state, r = next_uint32_below(state, inc, twod)
        ax = np.int64(r >> np.uint32(1))
        pos[ax] += np.int64(1 - 2 * np.int64(r & np.uint32(1)))
        steps += 1
        if steps > _STEP_GUARD:
            return state, nv, 2
        inside = True
        idx = 0
        for k in range(d):
            rel = pos[k] - win_lo[k]
            if rel < 0 or rel >= win_shape[k]:
                inside = False
                break
            idx += rel * win_strides[k]
        if inside and win_mask[idx]:
            if stamp[idx] != traj_id:
                stamp[idx] = traj_id
                visits[nv] = idx
                nv += 1
            in_ladder = False
            continue
        if in_ladder:
            da = pos[ax] - center[ax]
            if da == ladder_r or -da == ladder_r:
                if use_rung_faces and level == 0:
                    side = 0 if da == ladder_r else 1
                    f = 2 * ax + side
                    if ax == 0:
                        i1 = pos[1] - center[1] + ladder_r
                        i2 = pos[2] - center[2] + ladder_r
                    elif ax == 1:
                        i1 = pos[0] - center[0] + ladder_r
                        i2 = pos[2] - center[2] + ladder_r
                    else:
                        i1 = pos[0] - center[0] + ladder_r
                        i2 = pos[1] - center[1] + ladder_r
                    h = hfaces_rung[f, i1, i2]
                else:
                    h = h_exact_sum(pos, eq_pts, eq_w, table, trange,
                                    tstride, coef, a_d, dm2h)
                state, ub = next_double(state, inc)
                if ub < h:
                    level += 1
                    if level >= bail_level:
                        for k in range(d):
                            bail_pos[k] = pos[k]
                        return state, nv, _STATUS_BAIL
                    ladder_r *= 2
                    for k in range(d):
                        ladder_base[k] = pos[k]
                else:
                    for k in range(d):
                        pos[k] = ladder_base[k]
            continue
        da = pos[ax] - center[ax]
        if da == r_esc or -da == r_esc:
            if not use_h:
                return state, nv, _STATUS_DONE
            if use_faces:
                side = 0 if da == r_esc else 1
                f = 2 * ax + side
                if ax == 0:
                    i1 = pos[1] - center[1] + r_esc
                    i2 = pos[2] - center[2] + r_esc
                elif ax == 1:
                    i1 = pos[0] - center[0] + r_esc
                    i2 = pos[2] - center[2] + r_esc
                else:
                    i1 = pos[0] - center[0] + r_esc
                    i2 = pos[1] - center[1] + r_esc
                h = hfaces[f, i1, i2]
            else:
                h = h_exact_sum(pos, eq_pts, eq_w, table, trange,
                                tstride, coef, a_d, dm2h)
            state, ub = next_double(state, inc)
            if ub < h:
                in_ladder = True
                level = 0
                ladder_r = 2 * r_esc
                for k in range(d):
                    ladder_base[k] = pos[k]
                if bail_level == 0:
                    for k in range(d):
                        bail_pos[k] = pos[k]
                    return state, nv, _STATUS_BAIL
            else:
                return state, nv, _STATUS_DONE


# ---------------------------------------------------------------------------
# sample containers
# ---------------------------------------------------------------------------

@dataclass
class LabeledTrajectory:
    """One interlacement trajectory: its level label and window visits.

    Visits are bbox linear indices in first-visit order; path segments
    outside the window are not stored, occupancy only needs the window
    trace.
    """

    label: float
    visit_idx: np.ndarray


@dataclass
class InterlacementSample:
    """All trajectories of the interlacement cloud meeting a window, up to
    a maximal level; slicing by label realizes the monotone coupling in u."""

    window: Window
    u_max: float
    trajectories: list
    capacity: float

    def occupancy_grid(self, u) -> np.ndarray:
        """Boolean occupancy of the window bounding box at level u <= u_max."""
        if u < 0 or u > self.u_max + 1e-12:
            raise ValueError("u must lie in [0, u_max]")
        grid = np.zeros(self.window.bbox_shape, dtype=bool).ravel()
        for tr in self.trajectories:
            if tr.label <= u:
                grid[tr.visit_idx] = True
        return grid.reshape(self.window.bbox_shape)

    def occupancy_at(self, u) -> np.ndarray:
        """Occupied window sites at level u, as an (n, d) point array."""
        grid = self.occupancy_grid(u).ravel()
        idx = np.nonzero(grid)[0]
        rel = np.stack(np.unravel_index(idx, self.window.bbox_shape), axis=1)
        return rel + self.window.lo

    def n_trajectories_below(self, u) -> int:
        return sum(1 for tr in self.trajectories if tr.label <= u)

    def vacant_view(self, u) -> "VacantView":
        occ = self.occupancy_grid(u)
        window_mask = (
            self.window.mask
            if self.window.mask is not None
            else np.ones(self.window.bbox_shape, dtype=bool)
        )
        return VacantView(self.window, float(u), window_mask & ~occ)


@dataclass
class VacantView:
    """Vacant sites of the window at one level: window \\ occupancy."""

    window: Window
    u: float
    grid: np.ndarray  # boolean over bbox, True = vacant window site

    def sites(self) -> np.ndarray:
        idx = np.nonzero(self.grid.ravel())[0]
        rel = np.stack(np.unravel_index(idx, self.window.bbox_shape), axis=1)
        return rel + self.window.lo


# ---------------------------------------------------------------------------
# face precomputation for planar windows
# ---------------------------------------------------------------------------

def _plate_face_h(window: Window, eq: EquilibriumMeasure, green: GreenTable,
                  r_esc: int) -> np.ndarray:
    """h on the six faces of the escape cube of a planar window (d = 3).

    Returns array (6, 2R+1, 2R+1), indexed by face = 2*axis + side with
    side 0 for +R, 1 for -R; in-face coordinates are the remaining axes in
    ascending order, offset by +R.
    """
    R = int(r_esc)
    S = 2 * R + 1
    hx, hy = int(window.half_sides[0]), int(window.half_sides[1])
    e2 = np.zeros((2 * hx + 1, 2 * hy + 1))
    rel = eq.points - window.lo
    e2[rel[:, 0], rel[:, 1]] = eq.weights
    faces = np.empty((6, S, S))

    def g_grid(d0_vals, d1_vals, d2_vals):
        # g is even per coordinate: evaluate on |.| axes and gather back
        u0, inv0 = np.unique(np.abs(d0_vals), return_inverse=True)
        u1, inv1 = np.unique(np.abs(d1_vals), return_inverse=True)
        u2, inv2 = np.unique(np.abs(d2_vals), return_inverse=True)
        g0, g1, g2 = np.meshgrid(u0, u1, u2, indexing="ij")
        pts = np.stack([g0.ravel(), g1.ravel(), g2.ravel()], axis=1)
        vals = green.g_many(pts).reshape(g0.shape)
        return vals[inv0][:, inv1][:, :, inv2]

    # z faces (axis 2): full 2-d correlation with kernel g(dx, dy, R).
    # With kernel index p <-> displacement p - (R + h), the face value at
    # v in [-R, R]^2 sits at linear-convolution output index v + R + 2h.
    dxs = np.arange(-(R + hx), R + hx + 1)
    dys = np.arange(-(R + hy), R + hy + 1)
    kz = g_grid(dxs, dys, np.array([R]))[:, :, 0]
    n0 = sfft.next_fast_len(2 * R + 4 * hx + 1)
    n1 = sfft.next_fast_len(2 * R + 4 * hy + 1)
    conv = sfft.irfftn(
        sfft.rfftn(e2, (n0, n1)) * sfft.rfftn(kz, (n0, n1)), (n0, n1)
    )
    face_z = conv[2 * hx : 2 * hx + S, 2 * hy : 2 * hy + S].copy()
    faces[4] = face_z
    faces[5] = face_z  # g is even in z

    # side faces: 1-d convolutions along the in-plane transverse axis,
    # direct summation over the axis orthogonal to the face; kernels are
    # evaluated in chunks of that axis and mirrored in z (g is even)
    def side_face(h_long, h_short, swap, sign):
        dl = np.arange(-(R + h_long), R + h_long + 1)
        dz = np.arange(0, R + 1)
        n = sfft.next_fast_len(2 * R + 4 * h_long + 1)
        offs = np.arange(-h_short, h_short + 1)
        rows = e2[offs + hx, :] if not swap else e2[:, offs + hy].T
        live = np.nonzero(rows.any(axis=1))[0]
        acc_f = None
        chunk = max(1, 4_000_000 // (len(dl) * len(dz)))
        for i0 in range(0, len(live), chunk):
            sel = live[i0 : i0 + chunk]
            kern = g_grid(sign * R - offs[sel], dl, dz)  # (m, |dl|, R+1)
            rf = sfft.rfft(rows[sel], n, axis=1)         # (m, nf)
            kf = sfft.rfft(kern, n, axis=1)              # (m, nf, R+1)
            term = np.einsum("mf,mfz->fz", rf, kf)
            acc_f = term if acc_f is None else acc_f + term
        conv = sfft.irfft(acc_f, n, axis=0)
        half = conv[2 * h_long : 2 * h_long + S, :]
        face = np.empty((S, S))
        face[:, R:] = half
        face[:, :R] = half[:, :0:-1]  # g is even in the transverse coordinate
        return face

    sym_x = np.allclose(e2, e2[::-1, :], rtol=0, atol=1e-14)
    sym_y = np.allclose(e2, e2[:, ::-1], rtol=0, atol=1e-14)
    square = hx == hy and np.allclose(e2, e2.T, rtol=0, atol=1e-14)
    faces[0] = side_face(hy, hx, swap=False, sign=+1)
    faces[1] = faces[0] if sym_x else side_face(hy, hx, swap=False, sign=-1)
    faces[2] = faces[0] if square else side_face(hx, hy, swap=True, sign=+1)
    faces[3] = faces[2] if (square and sym_x) or sym_y else \
        side_face(hx, hy, swap=True, sign=-1)
    return faces


# ---------------------------------------------------------------------------
# exact re-entry distribution for the capped ladder
# ---------------------------------------------------------------------------

class _EntranceSolver:
    """Per-event exact re-entry law eps_x ( . ) = G^{-1} g( . - x) / h(x).

    The Toeplitz Green operator is applied by FFT over the window bounding
    box and conjugate gradients are preconditioned with the circulant
    (periodized) inverse.  For planar windows the solver additionally
    projects the right-hand side g( . - x) on a Chebyshev polynomial basis
    whose G^{-1}-images are precomputed once: from beyond the bail sphere
    the projection residual sits below the solve tolerance, so the common
    case costs three thin matrix products; a full CG solve remains as the
    certified fallback whenever the measured residual is too large.
    """

    PROJ_DEGREE = 12
    PROJ_TOL = 1e-9

    def __init__(self, window: Window, eq: EquilibriumMeasure,
                 green: GreenTable):
        self.green = green
        self.pts = eq.points
        self.window = window
        lo = self.pts.min(axis=0)
        hi = self.pts.max(axis=0)
        self.shape = tuple(int(v) for v in (hi - lo + 1))
        self.rel = tuple((self.pts - lo).T)
        disp_axes = [np.arange(-(s - 1), s) for s in self.shape]
        grids = np.meshgrid(*disp_axes, indexing="ij")
        disp = np.stack([g.ravel() for g in grids], axis=1)
        kernel = green.g_many(disp).reshape([2 * s - 1 for s in self.shape])
        self.fshape = [sfft.next_fast_len(2 * s - 1) for s in self.shape]
        self.kf = sfft.rfftn(kernel, self.fshape)
        self.read = tuple(slice(s - 1, 2 * s - 1) for s in self.shape)
        # circulant preconditioner: exact inverse of the periodized operator
        # (kernel symmetric, so the spectrum is real and rfft applies)
        shift = [-(s - 1) for s in self.shape]
        per = np.roll(kernel, shift, axis=tuple(range(len(self.shape))))
        self.pshape = per.shape
        self.spec = sfft.rfftn(per).real
        self.eq_w = eq.weights
        self.solves = 0
        self.cg_solves = 0
        self.iters = 0
        self._proj_q = None
        if window.is_planar() and len(self.pts) >= 4000:
            self._build_projection()

    def _matvec(self, vec):
        grid = np.zeros(self.shape)
        grid[self.rel] = vec
        conv = sfft.irfftn(sfft.rfftn(grid, self.fshape) * self.kf,
                           self.fshape)
        return conv[self.read][self.rel]

    def _matvec_batch(self, vecs):
        m = vecs.shape[0]
        grid = np.zeros((m,) + self.shape)
        grid[(slice(None),) + self.rel] = vecs
        axes = tuple(range(1, 1 + len(self.shape)))
        conv = sfft.irfftn(
            sfft.rfftn(grid, self.fshape, axes=axes, workers=2) * self.kf[None],
            self.fshape, axes=axes, workers=2,
        )
        return conv[(slice(None),) + self.read][(slice(None),) + self.rel]

    def _precond_batch(self, vecs):
        m = vecs.shape[0]
        grid = np.zeros((m,) + self.pshape)
        grid[(slice(None),) + self.rel] = vecs
        axes = tuple(range(1, 1 + len(self.shape)))
        z = sfft.irfftn(sfft.rfftn(grid, axes=axes, workers=2) / self.spec[None],
                        self.pshape, axes=axes, workers=2)
        return z[(slice(None),) + self.rel]

    def _cg_batch(self, B, X0, tol=1e-12, maxiter=400):
        X = X0.copy()
        R = B - self._matvec_batch(X)
        Z = self._precond_batch(R)
        P = Z.copy()
        rz = np.einsum("ij,ij->i", R, Z)
        bn = np.linalg.norm(B, axis=1)
        for it in range(maxiter):
            if (np.linalg.norm(R, axis=1) <= tol * bn).all():
                self.iters += it
                return X
            AP = self._matvec_batch(P)
            alpha = rz / np.einsum("ij,ij->i", P, AP)
            X += alpha[:, None] * P
            R -= alpha[:, None] * AP
            Z = self._precond_batch(R)
            rz2 = np.einsum("ij,ij->i", R, Z)
            P = Z + (rz2 / rz)[:, None] * P
            rz = rz2
        raise RuntimeError("entrance CG did not converge")

    def _build_projection(self):
        t = (self.pts[:, :2] - self.window.center[:2]).astype(float)
        t /= np.maximum(np.abs(t).max(axis=0), 1.0)
        p = self.PROJ_DEGREE
        cheb0 = [np.polynomial.chebyshev.chebvander(t[:, 0], p)]
        cheb1 = [np.polynomial.chebyshev.chebvander(t[:, 1], p)]
        c0, c1 = cheb0[0], cheb1[0]
        cols = [c0[:, i] * c1[:, j]
                for i in range(p + 1) for j in range(p + 1 - i)]
        M = np.stack(cols, axis=1)
        q, _ = np.linalg.qr(M)
        x0 = np.zeros((q.shape[1], len(self.pts)))
        solved = self._cg_batch(np.ascontiguousarray(q.T), x0)
        self._proj_q = q
        self._proj_solved = solved.T  # (n, m): columns G^{-1} q_k

    def entry_cdf(self, x):
        """Cumulative weights of the re-entry law from far point x."""
        b = self.green.g_many(self.pts - np.asarray(x, dtype=np.int64))
        self.solves += 1
        if self._proj_q is not None:
            gam = self._proj_q.T @ b
            resid = b - self._proj_q @ gam
            v = self._proj_solved @ gam
            if np.linalg.norm(resid) <= self.PROJ_TOL * np.linalg.norm(b):
                np.maximum(v, 0.0, out=v)
                return np.cumsum(v)
            x0 = v[None]
        else:
            x0 = (self.eq_w * float(b.mean()))[None]
        self.cg_solves += 1
        v = self._cg_batch(b[None], x0)[0]
        np.maximum(v, 0.0, out=v)
        return np.cumsum(v)


# ---------------------------------------------------------------------------
# the sampler
# ---------------------------------------------------------------------------

@dataclass
class SamplerConfig:
    """Tunables of the exact sampler.

    mode: 'auto' picks the walk-free chain realization up to
    chain_limit window sites and the stepping sampler beyond; 'chain',
    'walk' force a realization; 'truncate' is the biased cross-validation
    oracle that kills walks at kill_radius with a reported bias bound.

    escape_margin: l-inf gap between the window bounding box and the
    escape box (walk mode).  The default follows the conservative rule
    4 * (1 + diam_inf); performance-sensitive drivers pass something
    tighter.  Only speed depends on it, never the law.

    bail_level: ladder promotions before the exact re-entry solve takes
    over (walk mode).
    """

    mode: str = "auto"
    chain_limit: int = 6000
    escape_margin: int | None = None
    face_threshold: int = 3000
    solver: str = "auto"
    bail_level: int = 2
    kill_radius: int | None = None

    def resolved_margin(self, window: Window) -> int:
        if self.mode == "truncate":
            if self.kill_radius is None:
                raise ValueError("truncate mode needs kill_radius")
            return int(self.kill_radius)
        if self.escape_margin is not None:
            return max(2, int(self.escape_margin))
        return 4 * (1 + window.diam_inf())


class WindowSampler:
    """Reusable sampler bound to one window and Green table.

    Construction solves the equilibrium problem and precomputes whatever
    the chosen realization needs (visit-chain matrix, or escape-surface h
    tables plus the re-entry solver); all of it is level-independent and
    shared across replicates.
    """

    def __init__(self, window: Window, green: GreenTable,
                 config: SamplerConfig | None = None):
        if green.d != window.d:
            raise ValueError("green table dimension mismatch")
        self.window = window
        self.green = green
        self.config = config or SamplerConfig()
        n = window.n_sites
        mode = self.config.mode
        if mode == "auto":
            mode = "chain" if n <= self.config.chain_limit else "walk"
        self.mode = mode
        solver = self.config.solver
        if solver == "auto" and n > 4500:
            solver = "fft"
        self.eq = equilibrium_measure(window.sites(), green, solver=solver)
        self.capacity = self.eq.capacity
        sup = self.eq.weights > 0
        self._sup_pts = np.ascontiguousarray(self.eq.points[sup])
        self._sup_w = np.ascontiguousarray(self.eq.weights[sup])
        cdf = np.cumsum(self._sup_w)
        cdf /= cdf[-1]
        cdf[-1] = 1.0 + 1e-12
        self._sup_cdf = cdf
        nb = int(np.prod(window.bbox_shape))
        self._strides = np.cumprod(
            np.concatenate([[1], np.array(window.bbox_shape)[::-1][:-1]])
        )[::-1].astype(np.int64).copy()
        if window.mask is not None:
            self._mask_flat = window.mask.ravel().copy()
        else:
            self._mask_flat = np.ones(nb, dtype=bool)
        self._stamp = np.zeros(nb, dtype=np.int64)
        self._traj_counter = 0
        self._entrance = None

        if mode == "chain":
            self._build_chain()
        elif mode in ("walk", "truncate"):
            self._build_walk()
        else:
            raise ValueError(f"unknown sampler mode {mode!r}")

    # -- chain realization --------------------------------------------------

    def _build_chain(self):
        pts = self.eq.points
        n = len(pts)
        if n > self.config.chain_limit:
            raise MemoryError(
                f"chain mode needs a dense {n}x{n} inverse; raise chain_limit"
                " explicitly or use mode='walk'"
            )
        G = green_matrix(pts, pts, self.green)
        c, info = dpotrf(G, lower=1, overwrite_a=1)
        if info != 0:
            raise RuntimeError("green matrix not positive definite")
        ginv, info = dpotri(c, lower=1, overwrite_c=1)
        if info != 0:
            raise RuntimeError("green inversion failed")
        ginv = np.tril(ginv) + np.tril(ginv, -1).T
        # visit-chain kernel Q = I - G^{-1}; defect must equal e_K
        defect = ginv.sum(axis=1)
        if not np.allclose(defect, self.eq.weights, atol=1e-8):
            raise RuntimeError("chain defect disagrees with equilibrium weights")
        Q = -ginv
        np.fill_diagonal(Q, Q.diagonal() + 1.0)
        np.maximum(Q, 0.0, out=Q)
        self._q_cum = np.cumsum(Q, axis=1)
        self._site_idx = self.window.linear_index(pts).astype(np.int64)
        sup_rows = np.nonzero(self.eq.weights > 0)[0]
        self._sup_rows = sup_rows

    # -- walk realization ---------------------------------------------------

    def _build_walk(self):
        window = self.window
        margin = self.config.resolved_margin(window)
        self.r_escape = int(window.half_sides.max() + margin)
        self._use_h = self.config.mode != "truncate"
        self._use_faces = (
            self._use_h
            and window.d == 3
            and window.is_planar()
            and len(self._sup_pts) >= self.config.face_threshold
        )
        if self._use_faces:
            self._faces = _plate_face_h(window, self.eq, self.green,
                                        self.r_escape)
            self._faces_rung = _plate_face_h(window, self.eq, self.green,
                                             2 * self.r_escape)
        else:
            self._faces = np.zeros((1, 1, 1))
            self._faces_rung = np.zeros((1, 1, 1))
        self._pack = self.green.kernel_pack()

    def _entrance_solver(self) -> _EntranceSolver:
        if self._entrance is None:
            self._entrance = _EntranceSolver(self.window, self.eq, self.green)
        return self._entrance

    # -- shared plumbing ----------------------------------------------------

    def _draw_start(self, rng: RngStream):
        u = rng.uniform()
        k = int(np.searchsorted(self._sup_cdf, u, side="right"))
        return min(k, len(self._sup_pts) - 1)

    def draw_count_and_labels(self, u_max: float, rng: RngStream):
        n = rng.poisson(u_max * self.capacity)
        labels = np.array([u_max * (1.0 - rng.uniform()) for _ in range(n)])
        return n, labels

    def _one_trajectory(self, rng: RngStream, visits, nv):
        """Append one trajectory's visits, returning the new count."""
        self._traj_counter += 1
        traj_id = self._traj_counter
        k = self._draw_start(rng)
        if self.mode == "chain":
            row = int(self._sup_rows[k])
            state, inc = rng.state_pair()
            state, nv = _chain_trajectory(
                state, inc, row, self._q_cum, self._site_idx,
                visits, nv, self._stamp, traj_id,
            )
            rng.set_state(int(state) & 0xFFFFFFFFFFFFFFFF)
            return nv
        pos = self._sup_pts[k].copy()
        tbl, trange, tstride, coef, a_d, dm2h = self._pack
        bail_pos = np.empty(self.green.d, np.int64)
        bail_level = self.config.bail_level if self._use_h else 1 << 30
        while True:
            state, inc = rng.state_pair()
            state, nv, status = _walk_trajectory(
                state, inc, pos,
                self.window.lo, np.array(self.window.bbox_shape, np.int64),
                self._strides, self._mask_flat,
                self.window.center, np.int64(self.r_escape),
                self._use_h, np.int64(bail_level),
                self._use_faces, self._faces,
                self._use_faces, self._faces_rung,
                self._sup_pts, self._sup_w,
                tbl, trange, tstride, coef, a_d, dm2h,
                visits, nv, self._stamp, traj_id, bail_pos,
            )
            rng.set_state(int(state) & 0xFFFFFFFFFFFFFFFF)
            if status == _STATUS_DONE:
                return nv
            if status != _STATUS_BAIL:
                raise RuntimeError(f"trajectory kernel failed, status={status}")
            cdf = self._entrance_solver().entry_cdf(bail_pos)
            u = rng.uniform() * cdf[-1]
            j = min(int(np.searchsorted(cdf, u, side="right")),
                    len(cdf) - 1)
            pos = self.eq.points[j].copy()

    def _simulate(self, rng: RngStream, n_traj: int):
        """Visit-index arrays of n_traj fresh trajectories."""
        out = []
        visits = np.empty(max(4096, self.window.n_sites), dtype=np.int64)
        for _ in range(n_traj):
            nv = self._one_trajectory(rng, visits, 0)
            out.append(visits[:nv].copy())
        return out

    # -- public sampling ----------------------------------------------------

    def sample(self, u_max: float, rng: RngStream) -> InterlacementSample:
        if u_max < 0:
            raise ValueError("u_max must be nonnegative")
        n, labels = self.draw_count_and_labels(u_max, rng)
        visit_lists = self._simulate(rng, n)
        trajs = [
            LabeledTrajectory(float(l), v) for l, v in zip(labels, visit_lists)
        ]
        return InterlacementSample(
            window=self.window,
            u_max=float(u_max),
            trajectories=trajs,
            capacity=self.capacity,
        )

    def stream_occupancy(self, u_max: float, rng: RngStream, u_grid):
        """Generator of (u, occupancy_grid) along an increasing level grid.

        Labels are drawn up front and consumed in sorted order, so breaking
        out early skips the simulation of every higher-label trajectory;
        the yielded occupancies are exactly those of the coupled sample.
        """
        u_grid = np.asarray(u_grid, dtype=float)
        if (np.diff(u_grid) < 0).any() or u_grid.min() < 0 or \
           u_grid.max() > u_max + 1e-12:
            raise ValueError("u_grid must be increasing within [0, u_max]")
        n, labels = self.draw_count_and_labels(u_max, rng)
        labels = np.sort(labels)
        occ = np.zeros(int(np.prod(self.window.bbox_shape)), dtype=bool)
        visits = np.empty(max(4096, self.window.n_sites), dtype=np.int64)
        done = 0
        for u in u_grid:
            take = int(np.searchsorted(labels, u, side="right")) - done
            for _ in range(take):
                nv = self._one_trajectory(rng, visits, 0)
                occ[visits[:nv]] = True
            done += take
            yield float(u), occ.reshape(self.window.bbox_shape).copy()

    def truncation_bias_bound(self, u_max: float) -> float:
        """For truncate mode: expected count of wrongly-killed returns."""
        if self.config.mode != "truncate":
            return 0.0
        shell = self.r_escape - int(self.window.half_sides.max())
        h_max = min(1.0, self.capacity * self.green.upper_bound_beyond(shell))
        return u_max * self.capacity * h_max


def sample_interlacement(window: Window, u_max: float, green: GreenTable,
                         rng: RngStream,
                         config: SamplerConfig | None = None
                         ) -> InterlacementSample:
    """One-shot exact sample of the interlacement trace on a window."""
    return WindowSampler(window, green, config).sample(u_max, rng)


# ---------------------------------------------------------------------------
# reference continue-or-escape via literal Doob stepping (test-scale)
# ---------------------------------------------------------------------------

def continue_or_escape(current, window: Window, eq: EquilibriumMeasure,
                       green: GreenTable, rng: RngStream,
                       record_path: bool = True):
    """Decide return-vs-escape from a point outside the escape region and,
    on return, produce the conditioned re-entry path by literal h-transform
    stepping (transition weight proportional to p(x,z) h(z), h = 1 on K).

    This is the reference realization of the return law; the production
    kernels sample the same law through the retry ladder, the exact
    re-entry solve, or the visit chain.  Returns ('escaped', None) or
    ('returned', path) with path ending at the window entry site.
    """
    sup = eq.weights > 0
    pts = eq.points[sup]
    wts = eq.weights[sup]

    def h(z):
        if window.contains(z):
            return 1.0
        return float(green.g_many(z - pts) @ wts)

    x = np.asarray(current, dtype=np.int64).copy()
    if not rng.bernoulli(h(x)):
        return "escaped", None
    path = [x.copy()] if record_path else None
    d = green.d
    nbr = np.empty((2 * d, d), dtype=np.int64)
    while True:
        for i in range(d):
            nbr[2 * i] = x
            nbr[2 * i, i] += 1
            nbr[2 * i + 1] = x
            nbr[2 * i + 1, i] -= 1
        hv = np.array([h(z) for z in nbr])
        p = np.cumsum(hv / hv.sum())
        j = int(np.searchsorted(p, rng.uniform()))
        x = nbr[min(j, 2 * d - 1)].copy()
        if record_path:
            path.append(x.copy())
        if window.contains(x):
            return "returned", path


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def write_sample(sample: InterlacementSample, fh) -> None:
    """Line-oriented text dump: header, then one 'traj <label> x,y,z ...'
    line per trajectory (sites in first-visit order)."""
    close = False
    if isinstance(fh, (str, bytes)):
        fh = open(fh, "w")
        close = True
    try:
        w = sample.window
        fh.write("# rilab-sample v1\n")
        fh.write(f"# d={w.d} u_max={sample.u_max!r} cap={sample.capacity!r}\n")
        fh.write(f"# window center={','.join(map(str, w.center.tolist()))}"
                 f" half={','.join(map(str, w.half_sides.tolist()))}"
                 f" masked={int(w.mask is not None)}\n")
        shape = w.bbox_shape
        for tr in sample.trajectories:
            rel = np.stack(np.unravel_index(tr.visit_idx, shape), axis=1) + w.lo
            sites = " ".join(",".join(map(str, p)) for p in rel.tolist())
            fh.write(f"traj {tr.label!r} {sites}\n")
    finally:
        if close:
            fh.close()


def read_sample(fh, window: Window) -> InterlacementSample:
    close = False
    if isinstance(fh, (str, bytes)):
        fh = open(fh)
        close = True
    try:
        header = fh.readline()
        if "rilab-sample" not in header:
            raise ValueError("not a rilab sample file")
        meta = fh.readline().split()
        u_max = float(meta[2].split("=")[1])
        cap = float(meta[3].split("=")[1])
        fh.readline()
        trajs = []
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            label = float(parts[1])
            pts = np.array(
                [[int(v) for v in tok.split(",")] for tok in parts[2:]],
                dtype=np.int64,
            ).reshape(-1, window.d)
            idx = window.linear_index(pts)
            trajs.append(LabeledTrajectory(label, idx))
        return InterlacementSample(window, u_max, trajs, cap)
    finally:
        if close:
            fh.close()
