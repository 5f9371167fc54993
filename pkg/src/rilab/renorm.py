"""Multiscale renormalization machinery: scales, box hierarchy, levels.

The scheme works with a rapidly growing sequence of integer lengths
L_{n+1} = ell_n L_n, ell_n = 100 floor(L_n^{1/100}) + 1, a hierarchy of
d-dimensional boxes indexed over the coordinate plane, and a decreasing
sequence of intensity levels u_{n+1} = u_n / (1 + 1/log L_n) whose limit
stays positive.  Everything here is deterministic arithmetic (exact integer
where the quantities are integers, interval-certified where they are not);
the only Monte Carlo entry point is the crossing-probability estimator
built on the sampler.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import log

import mpmath
import numpy as np

from .geometry import Window

GROWTH_EXPONENT_DEN = 100  # a = 1/100


def integer_root(x: int, k: int) -> int:
    """floor(x^(1/k)) in exact integer arithmetic (any size of x)."""
    if x < 0 or k < 1:
        raise ValueError("x >= 0 and k >= 1 required")
    if x in (0, 1):
        return x
    r = 1 << -(-x.bit_length() // k)  # upper-bound power of two
    while True:
        # Newton step on r^k - x, floored; terminates at the floor root
        r_next = ((k - 1) * r + x // r ** (k - 1)) // k
        if r_next >= r:
            break
        r = r_next
    while r ** k > x:
        r -= 1
    while (r + 1) ** k <= x:
        r += 1
    return r


def side_length_factor(L: int) -> int:
    """ell(L) = 100 * floor(L^(1/100)) + 1; always odd and >= L^(1/100)."""
    return 100 * integer_root(L, GROWTH_EXPONENT_DEN) + 1


@dataclass
class ScaleCascade:
    """Exact integer scale sequences L_n and ell_n."""

    L0: int
    L: list            # L[n]
    ell: list          # ell[n]

    @staticmethod
    def build(L0: int, n_max: int) -> "ScaleCascade":
        """Python integers are unbounded, so no overflow level exists; the
        sequences are exact for every requested n."""
        if L0 < 2:
            raise ValueError("L0 must be an integer >= 2")
        if n_max < 0:
            raise ValueError("n_max must be >= 0")
        L = [int(L0)]
        ell = []
        for _ in range(n_max):
            ell.append(side_length_factor(L[-1]))
            L.append(ell[-1] * L[-1])
        ell.append(side_length_factor(L[-1]))
        return ScaleCascade(int(L0), L, ell)

    @property
    def n_levels(self) -> int:
        return len(self.L) - 1

    def check_growth(self) -> bool:
        """L_n >= L0^{(1+a)^n}, verified in exact integer arithmetic.

        The inductive step reduces to ell_n^100 >= L_n, which is exact on
        integers; the base power comparison L_n^{100^n} >= L0^{101^n} is
        additionally checked directly on the first levels.
        """
        for n in range(self.n_levels):
            if self.ell[n] ** GROWTH_EXPONENT_DEN < self.L[n]:
                return False
        for n in range(min(self.n_levels + 1, 3)):
            if self.L[n] ** (100 ** n) < self.L0 ** (101 ** n):
                return False
        return True

    def describe(self) -> dict:
        return {
            "L0": self.L0,
            "a": "1/100",
            "L": self.L,
            "ell": self.ell,
        }


@dataclass(frozen=True)
class BoxLabel:
    """Label m = (level n, plane index i) of one hierarchy box."""

    n: int
    i: tuple  # (i1, i2)


def box_of(label: BoxLabel, cascade: ScaleCascade, d: int) -> Window:
    """C_m = ([-L_n, L_n]^d + 2 L_n i), a d-dimensional cube displaced in
    the coordinate plane."""
    L = cascade.L[label.n]
    center = np.zeros(d, dtype=np.int64)
    center[0] = 2 * L * label.i[0]
    center[1] = 2 * L * label.i[1]
    return Window.cube(center, L)


def enlarged_box_of(label: BoxLabel, cascade: ScaleCascade, d: int) -> Window:
    """The union of C_m with its l-inf neighbor boxes: side 3 times larger."""
    L = cascade.L[label.n]
    center = np.zeros(d, dtype=np.int64)
    center[0] = 2 * L * label.i[0]
    center[1] = 2 * L * label.i[1]
    return Window.cube(center, 3 * L)


def sub_labels(label: BoxLabel, cascade: ScaleCascade) -> list:
    """Level-(n-1) labels whose boxes are contained in C_label; their plane
    traces partition the trace of C_label (ell is odd, hence the tiling)."""
    if label.n == 0:
        raise ValueError("level-0 boxes have no sub-boxes")
    ell = cascade.ell[label.n - 1]
    m = (ell - 1) // 2
    out = []
    for a in range(-m, m + 1):
        for b in range(-m, m + 1):
            out.append(
                BoxLabel(label.n - 1,
                         (ell * label.i[0] + a, ell * label.i[1] + b))
            )
    return out


def boundary_ring_labels(n: int, cascade: ScaleCascade) -> list:
    """Level-n labels whose boxes meet the interior boundary of the
    level-(n+1) box at the origin: plane indices with max-norm (ell-1)/2."""
    ell = cascade.ell[n]
    m = (ell - 1) // 2
    return [
        BoxLabel(n, (a, b))
        for a in range(-m, m + 1)
        for b in range(-m, m + 1)
        if max(abs(a), abs(b)) == m
    ]


def separation_ring_labels(n: int, cascade: ScaleCascade) -> list:
    """Level-n labels whose boxes meet the l-inf sphere of radius
    2 L_{n+1} around the origin: plane indices with max-norm ell."""
    ell = cascade.ell[n]
    return [
        BoxLabel(n, (a, b))
        for a in range(-ell, ell + 1)
        for b in range(-ell, ell + 1)
        if max(abs(a), abs(b)) == ell
    ]


# ---------------------------------------------------------------------------
# intensity levels
# ---------------------------------------------------------------------------

def seed_level(L0: int, c2: float = 1.0, d: int = 3) -> float:
    """Starting intensity u_0 = (4 / c2) (log L0)^2 L0^{-(d-2)}."""
    if L0 <= 1:
        raise ValueError("L0 must exceed 1")
    if c2 <= 0:
        raise ValueError("c2 must be positive")
    return (4.0 / c2) * log(L0) ** 2 * float(L0) ** (-(d - 2))


@dataclass
class LevelSequence:
    """u_n recursion along a cascade, with a certified limit bound."""

    u0: float
    u: list                  # u[n], floats by the exact recursion
    u_inf_lower: float       # certified: u_inf >= this > 0
    u_inf_upper: float

    @staticmethod
    def build(u0: float, cascade: ScaleCascade, n_max: int | None = None
              ) -> "LevelSequence":
        """u_{n+1} = u_n / (1 + 1/log L_n).

        The limit u_inf = u0 prod (1 + 1/log L_n)^{-1} is certified positive
        by interval arithmetic: the partial product to the last computed
        level is enclosed with mpmath intervals and the tail is bounded via
        log L_n >= (1+a)^n log L0, a geometric sum.
        """
        if not 0 < u0 <= 1:
            raise ValueError("u0 must lie in (0, 1]")
        n_max = cascade.n_levels if n_max is None else n_max
        if n_max > cascade.n_levels:
            raise ValueError("cascade too short for requested levels")
        us = [float(u0)]
        for n in range(n_max):
            us.append(us[-1] / (1.0 + 1.0 / log(cascade.L[n])))
        # extend the scales privately until the geometric tail bound
        # sum_{n >= N} 1/log L_n <= (1/log L_N) (1+a)/a becomes tight
        ext = list(cascade.L)
        while log(ext[-1]) < 5000 and len(ext) < 600:
            ext.append(side_length_factor(ext[-1]) * ext[-1])
        with mpmath.workprec(80):
            iv = mpmath.iv
            prod = iv.mpf(repr(float(u0)))
            for n in range(len(ext) - 1):
                logL = iv.log(iv.mpf(ext[n]))
                prod /= 1 + 1 / logL
            a = iv.mpf(1) / 100
            log_last = iv.log(iv.mpf(ext[-1]))
            tail = (1 / log_last) * (1 + a) / a
            lower = prod * iv.exp(-tail)
            lo = float(mpmath.mpf(lower.a))
            with mpmath.workprec(80):
                upper = iv.mpf(repr(float(u0)))
                for n in range(n_max):
                    upper /= 1 + 1 / iv.log(iv.mpf(cascade.L[n]))
            hi = float(mpmath.mpf(upper.b))
        if not lo > 0:
            raise RuntimeError("interval bound failed to certify u_inf > 0")
        return LevelSequence(float(u0), us, lo, hi)


# ---------------------------------------------------------------------------
# crossing-probability pipeline and induction diagnostics
# ---------------------------------------------------------------------------

def qn_window(n: int, cascade: ScaleCascade, d: int) -> Window:
    """Plane trace of the enlarged level-n box at the origin: the window the
    annulus-crossing event is sampled on."""
    return Window.plane_square(3 * cascade.L[n], d)


def estimate_qn(n: int, u: float, cascade: ScaleCascade, green,
                replicates: int, master_seed: int, sampler_config=None,
                workers: int = 1, stream_base: int = 0):
    """Monte Carlo estimate of the annulus-crossing probability at level n.

    Samples the interlacement trace on the plane trace of the enlarged box
    and tests for a star-path from the inner box to the boundary ring.
    """
    from .percolation import CrossingReport, annulus_crossing, wilson_interval
    from .rng import RngStream
    from .sampler import SamplerConfig, WindowSampler

    window = qn_window(n, cascade, d=green.d)
    cfg = sampler_config
    if cfg is None:
        half = 3 * cascade.L[n]
        cfg = SamplerConfig(escape_margin=max(16, half), solver="fft"
                            if window.n_sites > 4500 else "auto")
    sampler = WindowSampler(window, green, cfg)
    Ln = cascade.L[n]

    plane_ix = (slice(None), slice(None)) + (0,) * (green.d - 2)

    def run(k):
        rng = RngStream(master_seed, stream_base + k)
        s = sampler.sample(u, rng)
        return annulus_crossing(s.occupancy_grid(u)[plane_ix], Ln, 3 * Ln)

    if workers > 1:
        from joblib import Parallel, delayed
        flags = Parallel(n_jobs=workers, batch_size=max(1, replicates // (4 * workers)))(
            delayed(run)(k) for k in range(replicates)
        )
    else:
        flags = [run(k) for k in range(replicates)]
    return CrossingReport(
        event=f"annulus-crossing-n{n}",
        trials=replicates,
        successes=int(sum(flags)),
        params={"n": n, "L_n": Ln, "u": u, "d": green.d,
                "seed": master_seed},
    )


@dataclass
class InductionRow:
    n: int
    L_n: int
    ell_n: int
    u_n: float
    u_next: float
    drop_term: float          # c2 (u_n - u_{n+1}) L_n^{d-2}
    drop_threshold: float     # 2 log L_n
    drop_ok: bool
    q_hat: float | None
    q_ci: tuple | None
    contraction: float | None       # c1 ell_n^2 q_hat vs 1/L_n
    contraction_bound: float
    contraction_ok: bool | None
    ratio_diag: float | None        # empirical two-level recursion quotient


def induction_report(cascade: ScaleCascade, levels: LevelSequence,
                     q_reports: dict, d: int = 3, c1: float = 1.0,
                     c2: float = 1.0) -> list:
    """Tabulate both sides of the per-level induction conditions.

    q_reports maps level n to a CrossingReport (missing levels give
    arithmetic-only rows).  The two-level ratio column compares the measured
    q at level n+1 against the recursion bound built from level n; the
    paper-style constants are not explicit, so the column is a diagnostic,
    never a pass/fail.
    """
    rows = []
    for n in range(cascade.n_levels + 1):
        if n + 1 < len(levels.u):
            u_n, u_next = levels.u[n], levels.u[n + 1]
        else:
            break
        Ln, elln = cascade.L[n], cascade.ell[n]
        drop = c2 * (u_n - u_next) * float(Ln) ** (d - 2)
        thr = 2.0 * log(Ln)
        rep = q_reports.get(n)
        q_hat = rep.estimate if rep is not None else None
        ci = rep.ci if rep is not None else None
        contraction = c1 * elln ** 2 * q_hat if q_hat is not None else None
        bound = 1.0 / Ln
        ratio = None
        rep_next = q_reports.get(n + 1)
        if rep is not None and rep_next is not None:
            denom = elln ** 2 * (
                q_hat ** 2
                + u_next * float(Ln) ** -2
                + np.exp(-c2 * (u_n - u_next) * float(Ln) ** (d - 2))
            )
            if denom > 0:
                ratio = rep_next.estimate / denom
        rows.append(
            InductionRow(
                n=n, L_n=Ln, ell_n=elln, u_n=u_n, u_next=u_next,
                drop_term=drop, drop_threshold=thr, drop_ok=drop >= thr,
                q_hat=q_hat, q_ci=ci,
                contraction=contraction, contraction_bound=bound,
                contraction_ok=(contraction <= bound
                                if contraction is not None else None),
                ratio_diag=ratio,
            )
        )
    return rows


def format_induction_rows(rows) -> str:
    head = (
        "n L_n ell_n u_n u_next drop_term drop_thr drop_ok "
        "q_hat ci_lo ci_hi contraction bound contraction_ok ratio"
    ).split()
    lines = ["\t".join(head)]
    for r in rows:
        ci = r.q_ci or (float("nan"), float("nan"))
        vals = [
            r.n, r.L_n, r.ell_n, f"{r.u_n:.6g}", f"{r.u_next:.6g}",
            f"{r.drop_term:.6g}", f"{r.drop_threshold:.6g}", r.drop_ok,
            "nan" if r.q_hat is None else f"{r.q_hat:.6g}",
            f"{ci[0]:.6g}", f"{ci[1]:.6g}",
            "nan" if r.contraction is None else f"{r.contraction:.6g}",
            f"{r.contraction_bound:.6g}",
            "na" if r.contraction_ok is None else r.contraction_ok,
            "nan" if r.ratio_diag is None else f"{r.ratio_diag:.6g}",
        ]
        lines.append("\t".join(str(v) for v in vals))
    return "\n".join(lines)
