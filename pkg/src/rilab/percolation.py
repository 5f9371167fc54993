"""Connectivity analysis of plane occupancy configurations.

Everything here operates on 2-d boolean grids: the trace of the occupancy
(or vacancy) on the embedded coordinate plane.  Site adjacency is either
nearest-neighbor ('nn', 4 neighbors) or star ('star', 8 neighbors including
diagonals).  Crossing events are decided through connected components, never
by explicit path tracing: a component meeting both target sets contains a
path between them, and a self-avoiding path can always be extracted from it.

The origin-percolation proxy uses planar duality: the nearest-neighbor
vacant cluster of the origin is finite and clear of the window edge exactly
when an occupied star-circuit surrounds the origin inside the window.
Clusters touching the window edge are conservatively reported as reaching
the boundary (the infinite-lattice event is only approximated by a window).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

_STRUCT = {
    "nn": ndimage.generate_binary_structure(2, 1),
    "star": np.ones((3, 3), dtype=bool),
}

_Z95 = 1.959963984540054


@dataclass
class ClusterLabeling:
    adjacency: str
    labels: np.ndarray       # 0 = off-configuration, components numbered from 1
    n_components: int

    def sizes(self) -> np.ndarray:
        if self.n_components == 0:
            return np.zeros(0, dtype=np.int64)
        return np.bincount(self.labels.ravel())[1:]


def label_clusters(config: np.ndarray, adjacency: str = "star"
                   ) -> ClusterLabeling:
    """Connected components of a boolean grid under the chosen adjacency."""
    if adjacency not in _STRUCT:
        raise ValueError(f"unknown adjacency {adjacency!r}")
    labels, n = ndimage.label(np.asarray(config, dtype=bool),
                              structure=_STRUCT[adjacency])
    return ClusterLabeling(adjacency, labels, int(n))


def sets_connected(config: np.ndarray, set_a: np.ndarray, set_b: np.ndarray,
                   adjacency: str = "star") -> bool:
    """True iff some component of config intersects both site masks."""
    lab = label_clusters(config, adjacency)
    la = np.unique(lab.labels[set_a & config])
    if la.size == 0:
        return False
    lb = np.unique(lab.labels[set_b & config])
    return bool(np.intersect1d(la[la > 0], lb[lb > 0]).size)


# ---------------------------------------------------------------------------
# fixed crossing events
# ---------------------------------------------------------------------------

def annulus_crossing(occ2: np.ndarray, inner_half: int, outer_half: int
                     ) -> bool:
    """Star-path event from the centered box of half-width inner_half to the
    interior boundary of the centered box of half-width outer_half.

    occ2 must be the occupancy of the plane square of half-width outer_half
    (side 2*outer_half + 1), origin at the array center.
    """
    side = 2 * outer_half + 1
    if occ2.shape != (side, side):
        raise ValueError("occupancy grid does not match the outer box")
    c = outer_half
    inner = np.zeros_like(occ2, dtype=bool)
    inner[c - inner_half : c + inner_half + 1,
          c - inner_half : c + inner_half + 1] = True
    ring = np.zeros_like(occ2, dtype=bool)
    ring[0, :] = ring[-1, :] = True
    ring[:, 0] = ring[:, -1] = True
    return sets_connected(occ2, inner, ring, "star")


def rectangle_crossing(occ2: np.ndarray, L0: int) -> bool:
    """Left-right star-crossing of the rectangle [0, 2 L0] x [0, 6 L0]:
    a star-component joins the column x=0 to the column x = 2 L0 - 1."""
    if occ2.shape != (2 * L0 + 1, 6 * L0 + 1):
        raise ValueError("occupancy grid does not match the rectangle")
    left = np.zeros_like(occ2, dtype=bool)
    left[0, :] = True
    right = np.zeros_like(occ2, dtype=bool)
    right[2 * L0 - 1, :] = True
    return sets_connected(occ2, left, right, "star")


@dataclass
class OriginProxyResult:
    reaches_boundary: bool
    circuit_surrounds: bool
    origin_occupied: bool


def origin_percolation_proxy(occ2: np.ndarray, window_mask2: np.ndarray,
                             origin_index) -> OriginProxyResult:
    """Vacant-cluster reach of the origin, plus the dual circuit verdict.

    occ2: plane occupancy over the window bounding box; window_mask2 marks
    window sites.  The vacant set is window & ~occupied.  If the origin is
    occupied the proxy reports blocked, with the circuit conventionally true.
    Duality: a finite vacant nn-cluster clear of the window edge is
    equivalent to an occupied star-circuit surrounding the origin.
    """
    oi, oj = origin_index
    if occ2[oi, oj]:
        return OriginProxyResult(False, True, True)
    vacant = window_mask2 & ~occ2
    lab = label_clusters(vacant, "nn")
    cluster_id = lab.labels[oi, oj]
    cluster = lab.labels == cluster_id
    # edge sites of the window: window sites with a nn neighbor outside
    interior = (
        np.roll(window_mask2, 1, 0) & np.roll(window_mask2, -1, 0)
        & np.roll(window_mask2, 1, 1) & np.roll(window_mask2, -1, 1)
    )
    interior[0, :] = interior[-1, :] = False
    interior[:, 0] = interior[:, -1] = False
    edge = window_mask2 & ~interior
    touches = bool((cluster & edge).any())
    return OriginProxyResult(
        reaches_boundary=touches,
        circuit_surrounds=not touches,
        origin_occupied=False,
    )


# ---------------------------------------------------------------------------
# Monte Carlo estimation
# ---------------------------------------------------------------------------

def wilson_interval(successes: int, trials: int, z: float = _Z95):
    """Wilson score interval for a binomial proportion."""
    if trials == 0:
        return 0.0, 1.0
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = (
        z * np.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials))
        / denom
    )
    return max(0.0, center - half), min(1.0, center + half)


@dataclass
class CrossingReport:
    """Monte Carlo estimate of one event probability."""

    event: str
    trials: int
    successes: int
    params: dict

    @property
    def estimate(self) -> float:
        return self.successes / self.trials if self.trials else float("nan")

    @property
    def ci(self):
        return wilson_interval(self.successes, self.trials)

    def __post_init__(self):
        if self.successes > self.trials:
            raise ValueError("successes cannot exceed trials")

    def csv_row(self) -> str:
        lo, hi = self.ci
        extras = ",".join(str(self.params[k]) for k in sorted(self.params))
        return (
            f"{self.event},{self.trials},{self.successes},"
            f"{self.estimate:.8g},{lo:.8g},{hi:.8g},{extras}"
        )


def estimate_event(event, sample_factory, replicates: int, master_seed: int,
                   stream_base: int = 0, name: str = "event",
                   params: dict | None = None, workers: int = 1
                   ) -> CrossingReport:
    """Estimate P[event] over iid replicates with per-replicate streams.

    event(sample) -> bool; sample_factory(rng) -> sample.  Replicate k uses
    stream index stream_base + k, so results are identical for any worker
    count; parallel execution simply partitions the index range.
    """
    from .rng import RngStream

    def run_one(k):
        rng = RngStream(master_seed, stream_base + k)
        return bool(event(sample_factory(rng)))

    if workers > 1:
        from joblib import Parallel, delayed

        flags = Parallel(n_jobs=workers, batch_size=max(1, replicates // (4 * workers)))(
            delayed(run_one)(k) for k in range(replicates)
        )
    else:
        flags = [run_one(k) for k in range(replicates)]
    return CrossingReport(
        event=name,
        trials=replicates,
        successes=int(sum(flags)),
        params=params or {},
    )
