"""Reproducible experiment drivers behind the command-line interface.

Each command validates its configuration, runs a deterministic replicate
schedule (replicate k always uses stream index stream_base + k, so results
do not depend on the worker count), and emits a CSV file whose commented
header echoes the full configuration, the master seed and the method tags.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import __version__
from .equilibrium import equilibrium_measure, pair_capacity
from .geometry import Window, euclidean_ball, embed_plane
from .green import GreenTable, build_green_table
from .percolation import (
    CrossingReport,
    origin_percolation_proxy,
    wilson_interval,
)
from .renorm import (
    LevelSequence,
    ScaleCascade,
    estimate_qn,
    format_induction_rows,
    induction_report,
    seed_level,
)
from .rng import RngStream
from .sampler import SamplerConfig, WindowSampler


@dataclass
class ExperimentConfig:
    command: str
    d: int = 3
    u: float | None = None
    u_grid: list = field(default_factory=list)
    L: int | None = None
    L_grid: list = field(default_factory=list)
    window: int | None = None
    reps: int = 1000
    master_seed: int = 0
    c1: float = 1.0
    c2: float = 1.0
    workers: int = 1
    out: str | None = None
    green_range: int = 28
    green_cache: str | None = None
    chain_limit: int = 6000

    def validate(self):
        if self.d < 3:
            raise ValueError("dimension must be >= 3")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.u is not None and self.u < 0:
            raise ValueError("u must be nonnegative")
        for v in self.u_grid:
            if v < 0:
                raise ValueError("u grid entries must be nonnegative")
        if sorted(self.u_grid) != list(self.u_grid):
            raise ValueError("u grid must be increasing")
        return self


@dataclass
class ResultRecord:
    config: ExperimentConfig
    columns: list
    rows: list
    summary: dict
    wall_clock: float
    method_tags: dict

    def to_csv(self) -> str:
        lines = [f"# rilab {__version__} command={self.config.command}"]
        cfg = {k: v for k, v in asdict(self.config).items() if v not in (None, [])}
        lines.append("# config " + json.dumps(cfg, sort_keys=True))
        lines.append("# methods " + json.dumps(self.method_tags, sort_keys=True))
        lines.append("# summary " + json.dumps(self.summary, sort_keys=True))
        lines.append(f"# wall_clock_s {self.wall_clock:.3f}")
        lines.append(",".join(self.columns))
        for row in self.rows:
            lines.append(",".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"

    def write(self, path=None):
        path = path or self.config.out
        text = self.to_csv()
        if path:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def binomial_z(successes: int, trials: int, p0: float) -> float:
    """Signed z-score of an observed count against a predicted probability.

    Below 30 expected successes or failures the normal approximation is
    replaced by the exact binomial tail, mapped back to a z value.
    """
    mean = trials * p0
    if min(mean, trials - mean) >= 30:
        sd = np.sqrt(trials * p0 * (1 - p0))
        return float((successes - mean) / sd)
    lo = stats.binom.cdf(successes, trials, p0)
    hi = stats.binom.sf(successes - 1, trials, p0)
    pval = max(min(2 * min(lo, hi), 1.0), 1e-300)
    z = stats.norm.isf(pval / 2)
    return float(np.sign(successes - mean) * z)


def _green(cfg: ExperimentConfig) -> GreenTable:
    return build_green_table(cfg.d, range=cfg.green_range,
                             cache_path=cfg.green_cache)


def _parallel_map(fn, count, workers):
    if workers > 1:
        from joblib import Parallel, delayed

        return Parallel(n_jobs=workers,
                        batch_size=max(1, count // (4 * workers)))(
            delayed(fn)(k) for k in range(count)
        )
    return [fn(k) for k in range(count)]


# ---------------------------------------------------------------------------
# vacancy law
# ---------------------------------------------------------------------------

_VACANCY_SETS = {
    "origin": lambda d: np.zeros((1, d), dtype=np.int64),
    "pair3": lambda d: np.stack([np.zeros(d, np.int64),
                                 3 * np.eye(d, dtype=np.int64)[0]]),
    "ball2": lambda d: euclidean_ball(np.zeros(d, np.int64), 2),
}


def cmd_vacancy_law(cfg: ExperimentConfig) -> ResultRecord:
    """Empirical P[window fully vacant] against exp(-u cap(K))."""
    cfg.validate()
    t0 = time.time()
    green = _green(cfg)
    us = list(cfg.u_grid) or [cfg.u if cfg.u is not None else 1.0]
    rows = []
    worst = 0.0
    stream = 0
    for name, maker in _VACANCY_SETS.items():
        K = maker(cfg.d)
        window = Window.point_set(K)
        sampler = WindowSampler(window, green,
                                SamplerConfig(chain_limit=cfg.chain_limit))
        cap = sampler.capacity
        for u in us:
            pred = float(np.exp(-u * cap))

            def run(k, _s=sampler, _u=u):
                rng = RngStream(cfg.master_seed, stream + k)
                s = _s.sample(_u, rng)
                return not s.occupancy_grid(_u).any()

            flags = _parallel_map(run, cfg.reps, cfg.workers)
            succ = int(sum(flags))
            z = binomial_z(succ, cfg.reps, pred)
            worst = max(worst, abs(z))
            rows.append([name, len(K), u, cap, pred, succ / cfg.reps, z])
            stream += cfg.reps
    rec = ResultRecord(
        config=cfg,
        columns=["set", "n_sites", "u", "capacity", "predicted",
                 "estimated", "z"],
        rows=rows,
        summary={"worst_abs_z": worst, "cells": len(rows)},
        wall_clock=time.time() - t0,
        method_tags={"green": green.method, "sampler": "chain"},
    )
    rec.write()
    return rec


# ---------------------------------------------------------------------------
# capacity scaling
# ---------------------------------------------------------------------------

def cmd_capacity_scaling(cfg: ExperimentConfig) -> ResultRecord:
    """cap(B(0, L)) against the L^{d-2} growth law."""
    cfg.validate()
    t0 = time.time()
    green = _green(cfg)
    Ls = list(cfg.L_grid) or [2, 4, 8, 16]
    rows = []
    caps = []
    for L in Ls:
        ball = euclidean_ball(np.zeros(cfg.d, np.int64), L)
        eq = equilibrium_measure(
            ball, green,
            solver="fft" if len(ball) > 4500 else "auto",
        )
        caps.append(eq.capacity)
        rows.append([L, len(ball), eq.capacity, eq.residual, eq.solver])
    slope = float(np.polyfit(np.log(Ls), np.log(caps), 1)[0])
    rec = ResultRecord(
        config=cfg,
        columns=["L", "n_sites", "capacity", "residual", "solver"],
        rows=rows,
        summary={"loglog_slope": slope, "target_exponent": cfg.d - 2},
        wall_clock=time.time() - t0,
        method_tags={"green": green.method, "solve": "boundary-restricted"},
    )
    rec.write()
    return rec


# ---------------------------------------------------------------------------
# correlation decay
# ---------------------------------------------------------------------------

def cmd_correlation(cfg: ExperimentConfig) -> ResultRecord:
    """Two-point vacancy: P[x,y vacant] = exp(-2u/(g(0)+g(y-x))) and the
    covariance decay exponent -(d-2)."""
    cfg.validate()
    t0 = time.time()
    green = _green(cfg)
    u = cfg.u if cfg.u is not None else 1.0
    seps = list(cfg.L_grid) or [1, 2, 4, 8, 16]
    g0 = green.g_zero()
    p1 = float(np.exp(-u / g0))
    rows = []
    stream = 0
    for r in seps:
        gr = green.g(r * np.eye(cfg.d, dtype=np.int64)[0])
        cap2 = pair_capacity(g0, gr)
        pred_joint = float(np.exp(-u * cap2))
        cov = pred_joint - p1 * p1
        K = np.stack([np.zeros(cfg.d, np.int64),
                      r * np.eye(cfg.d, dtype=np.int64)[0]])
        sampler = WindowSampler(Window.point_set(K), green, SamplerConfig())

        def run(k, _s=sampler):
            rng = RngStream(cfg.master_seed, stream + k)
            s = _s.sample(u, rng)
            return not s.occupancy_grid(u).any()

        flags = _parallel_map(run, cfg.reps, cfg.workers)
        succ = int(sum(flags))
        z = binomial_z(succ, cfg.reps, pred_joint)
        rows.append([r, gr, cap2, pred_joint, succ / cfg.reps, z, cov])
        stream += cfg.reps
    rs = np.array([row[0] for row in rows], dtype=float)
    covs = np.array([row[6] for row in rows])
    fit_sel = rs >= 4
    if fit_sel.sum() >= 2:
        exponent = float(
            np.polyfit(np.log(rs[fit_sel]), np.log(covs[fit_sel]), 1)[0]
        )
    else:
        exponent = float("nan")
    rec = ResultRecord(
        config=cfg,
        columns=["r", "g_r", "pair_capacity", "pred_joint_vacant",
                 "est_joint_vacant", "z", "analytic_covariance"],
        rows=rows,
        summary={"analytic_decay_exponent": exponent,
                 "target_exponent": -(cfg.d - 2), "u": u},
        wall_clock=time.time() - t0,
        method_tags={"green": green.method, "sampler": "chain"},
    )
    rec.write()
    return rec


# ---------------------------------------------------------------------------
# q_n sweep over L0
# ---------------------------------------------------------------------------

def cmd_qn_sweep(cfg: ExperimentConfig) -> ResultRecord:
    """q_0 estimates at the seed level u_0(L_0) across an L_0 grid."""
    cfg.validate()
    t0 = time.time()
    green = _green(cfg)
    Ls = list(cfg.L_grid) or [8, 16, 32]
    rows = []
    scaled = []
    stream = 0
    for L0 in Ls:
        u0 = seed_level(L0, cfg.c2, cfg.d)
        casc = ScaleCascade.build(L0, 0)
        rep = estimate_qn(
            0, u0, casc, green, cfg.reps, cfg.master_seed,
            workers=cfg.workers, stream_base=stream,
        )
        stream += cfg.reps
        lo, hi = rep.ci
        rows.append([L0, u0, rep.trials, rep.successes, rep.estimate,
                     lo, hi, L0 * rep.estimate, L0 * lo, L0 * hi])
        scaled.append((L0 * lo, L0 * hi))
    # trend: nonincreasing within CI across consecutive cells
    monotone = all(
        scaled[i + 1][0] <= scaled[i][1] + 1e-12
        for i in range(len(scaled) - 1)
    )
    rec = ResultRecord(
        config=cfg,
        columns=["L0", "u0", "trials", "successes", "q0_hat", "ci_lo",
                 "ci_hi", "L0_q0", "L0_q0_lo", "L0_q0_hi"],
        rows=rows,
        summary={"scaled_nonincreasing_within_ci": monotone,
                 "c2": cfg.c2},
        wall_clock=time.time() - t0,
        method_tags={"green": green.method, "sampler": "walk+chain"},
    )
    rec.write()
    return rec


# ---------------------------------------------------------------------------
# eta curve and critical-level bracket
# ---------------------------------------------------------------------------

def _eta_curve_counts(cfg: ExperimentConfig, green: GreenTable, M: int,
                      u_grid, early_stop: bool = True):
    """Per-u counts of (origin vacant-cluster reaches boundary) on coupled
    replicates.

    With early_stop a replicate breaks at its first blocked grid level: the
    coupling makes every higher level blocked too, so the higher-label
    trajectories never need simulating.  Without early_stop every level is
    evaluated explicitly and monotonicity violations are counted (the
    coupling guarantees zero; the count is the check).
    """
    window = Window.plane_disk(M, cfg.d)
    mask2 = window.plane_trace_mask()
    oi = int(window.half_sides[0])
    origin = (oi, oi)
    sampler_cfg = SamplerConfig(
        mode="walk" if window.n_sites > cfg.chain_limit else "chain",
        escape_margin=max(24, 2 * M // 5),
        solver="fft" if window.n_sites > 4500 else "auto",
        chain_limit=cfg.chain_limit,
    )
    sampler = WindowSampler(window, green, sampler_cfg)
    u_grid = list(u_grid)
    u_max = u_grid[-1]
    plane_ix = (slice(None), slice(None)) + (0,) * (cfg.d - 2)

    def run(k):
        rng = RngStream(cfg.master_seed, k)
        reach = []
        for u, occ in sampler.stream_occupancy(u_max, rng, u_grid):
            res = origin_percolation_proxy(occ[plane_ix], mask2, origin)
            reach.append(res.reaches_boundary)
            if early_stop and not res.reaches_boundary:
                break
        reach.extend([False] * (len(u_grid) - len(reach)))
        return reach

    results = _parallel_map(run, cfg.reps, cfg.workers)
    counts = np.zeros(len(u_grid), dtype=np.int64)
    violations = 0
    for reach in results:
        seen_block = False
        for j, flag in enumerate(reach):
            if flag and seen_block:
                violations += 1
            if not flag:
                seen_block = True
            counts[j] += flag
    return counts, violations, sampler


def cmd_eta_curve(cfg: ExperimentConfig) -> ResultRecord:
    """Window proxy of the vacant-percolation function: per u, the
    probability that the origin's vacant cluster reaches the boundary of
    the plane disk of radius M (coupled across u within each replicate)."""
    cfg.validate()
    t0 = time.time()
    green = _green(cfg)
    M = cfg.window or 100
    u_grid = list(cfg.u_grid) or [0.05, 0.2, 0.4, 0.7, 1.0, 1.5, 2.5, 5.0]
    counts, violations, sampler = _eta_curve_counts(cfg, green, M, u_grid)
    rows = []
    for u, c in zip(u_grid, counts):
        lo, hi = wilson_interval(int(c), cfg.reps)
        rows.append([u, cfg.reps, int(c), c / cfg.reps, lo, hi])
    rec = ResultRecord(
        config=cfg,
        columns=["u", "trials", "reaches", "eta_hat", "ci_lo", "ci_hi"],
        rows=rows,
        summary={
            "M": M,
            "monotonicity_violations": int(violations),
            "eta_first": counts[0] / cfg.reps,
            "eta_last": counts[-1] / cfg.reps,
            "window_note": "finite-window proxy; boundary-touching vacant "
                           "clusters count as reaching",
        },
        wall_clock=time.time() - t0,
        method_tags={"green": green.method, "sampler": sampler.mode},
    )
    rec.write()
    return rec


def cmd_ustar_bracket(cfg: ExperimentConfig) -> ResultRecord:
    """Window-dependent bracket for the critical level: the largest grid u
    with eta_hat clearly positive and the smallest with eta_hat compatible
    with zero."""
    cfg.validate()
    t0 = time.time()
    green = _green(cfg)
    M = cfg.window or 60
    u_grid = list(cfg.u_grid) or [0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0]
    counts, violations, sampler = _eta_curve_counts(cfg, green, M, u_grid)
    rows = []
    lower = None
    upper = None
    for u, c in zip(u_grid, counts):
        lo, hi = wilson_interval(int(c), cfg.reps)
        rows.append([u, cfg.reps, int(c), c / cfg.reps, lo, hi])
        if lo >= 0.2:
            lower = u
        if hi <= 0.05 and upper is None:
            upper = u
    rec = ResultRecord(
        config=cfg,
        columns=["u", "trials", "reaches", "eta_hat", "ci_lo", "ci_hi"],
        rows=rows,
        summary={
            "M": M,
            "bracket_low": lower,
            "bracket_high": upper,
            "bracket_note": "window-dependent interval, not an estimate of "
                            "the infinite-lattice critical level",
            "monotonicity_violations": int(violations),
        },
        wall_clock=time.time() - t0,
        method_tags={"green": green.method, "sampler": sampler.mode},
    )
    rec.write()
    return rec


# ---------------------------------------------------------------------------
# cascade dump and induction report
# ---------------------------------------------------------------------------

def cmd_cascade_dump(cfg: ExperimentConfig) -> ResultRecord:
    cfg.validate()
    t0 = time.time()
    L0 = cfg.L or 10
    n = cfg.window if cfg.window is not None else 4
    casc = ScaleCascade.build(L0, n)
    u0 = cfg.u if cfg.u is not None else min(1.0, seed_level(L0, cfg.c2, cfg.d))
    levels = LevelSequence.build(u0, casc)
    rows = [
        [k, casc.L[k], casc.ell[k] if k < len(casc.ell) else "",
         levels.u[k] if k < len(levels.u) else ""]
        for k in range(len(casc.L))
    ]
    rec = ResultRecord(
        config=cfg,
        columns=["n", "L_n", "ell_n", "u_n"],
        rows=rows,
        summary={
            "growth_verified": casc.check_growth(),
            "u0": u0,
            "u_inf_lower": levels.u_inf_lower,
            "u_inf_upper": levels.u_inf_upper,
        },
        wall_clock=time.time() - t0,
        method_tags={"arithmetic": "exact-integer+interval"},
    )
    rec.write()
    return rec


def cmd_induction_report(cfg: ExperimentConfig) -> ResultRecord:
    """Both sides of the level-recursion conditions, with measured q_0 (and
    q_1 when affordable) plugged in."""
    cfg.validate()
    t0 = time.time()
    green = _green(cfg)
    L0 = cfg.L or 8
    n_levels = cfg.window if cfg.window is not None else 1
    casc = ScaleCascade.build(L0, max(1, n_levels))
    u0 = cfg.u if cfg.u is not None else min(1.0, seed_level(L0, cfg.c2, cfg.d))
    levels = LevelSequence.build(u0, casc)
    q_reports = {}
    stream = 0
    for n in range(n_levels):
        size = (6 * casc.L[n] + 1) ** 2
        if size > 200_000:
            break
        q_reports[n] = estimate_qn(
            n, levels.u[n], casc, green, cfg.reps, cfg.master_seed,
            workers=cfg.workers, stream_base=stream,
        )
        stream += cfg.reps
    rows_obj = induction_report(casc, levels, q_reports, d=cfg.d,
                                c1=cfg.c1, c2=cfg.c2)
    text = format_induction_rows(rows_obj)
    rows = [line.split("\t") for line in text.splitlines()[1:]]
    rec = ResultRecord(
        config=cfg,
        columns=text.splitlines()[0].split("\t"),
        rows=rows,
        summary={"measured_levels": sorted(q_reports),
                 "u_inf_lower": levels.u_inf_lower},
        wall_clock=time.time() - t0,
        method_tags={"green": green.method},
    )
    rec.write()
    return rec


COMMANDS = {
    "vacancy-law": cmd_vacancy_law,
    "capacity-scaling": cmd_capacity_scaling,
    "correlation": cmd_correlation,
    "qn-sweep": cmd_qn_sweep,
    "eta-curve": cmd_eta_curve,
    "ustar-bracket": cmd_ustar_bracket,
    "cascade-dump": cmd_cascade_dump,
    "induction-report": cmd_induction_report,
}
