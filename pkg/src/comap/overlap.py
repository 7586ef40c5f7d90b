"""Overlap assessment: classify cone samples against neighbor map points.

A query pose is expanded into its view cone, sampled, and each sample is
REDUNDANT when some neighbor map point lies within the mean sample spacing
``r``. The redundant fraction is the overlap degree; above ``t_seen`` the
pose counts as a seen location.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, cone_from_fov, sample_cone
from .mapstore import GlobalMap, neighbor_point_rows
from .params import DEFAULT_PARAMS, ProtocolParams
from .spatial import KdTree


@dataclass
class OverlapVerdict:
    """Outcome of one overlap assessment."""

    overlap_degree: float
    seen: bool
    redundant_samples: np.ndarray
    fresh_samples: np.ndarray
    r: float
    sample_count: int

    @property
    def redundant_count(self) -> int:
        return len(self.redundant_samples)

    @property
    def fresh_count(self) -> int:
        return len(self.fresh_samples)


def classify_samples(samples: np.ndarray, neighbor_points: np.ndarray, r: float) -> np.ndarray:
    """Boolean redundancy mask: sample i has a neighbor point within r (inclusive)."""
    if not len(neighbor_points):
        return np.zeros(len(samples), dtype=bool)
    return KdTree(neighbor_points).any_within(samples, r)


def assess_overlap(
    map: GlobalMap,
    q: Pose,
    q_fov: float,
    k: int,
    seed: int,
    t_seen: float | None = None,
    params: ProtocolParams = DEFAULT_PARAMS,
    exclude_client: int | None = None,
    redundancy_filter=None,
) -> OverlapVerdict:
    """Assess how much of the view cone at ``q`` is already mapped.

    ``k`` samples are drawn deterministically from the cone (height
    ``params.h``); neighbor frames are gated by distance ``params.t_d`` and
    axis angle, and their points are indexed in a per-query KD-tree. The
    verdict is deterministic given the map contents, query, and seed.

    ``redundancy_filter(samples, mask, neighbors) -> mask`` is a hook for
    stricter classification (e.g. view-direction aware); it ships disabled.
    """
    if k < 1:
        raise ValueError(f"sample count must be >= 1, got {k}")
    t_seen = params.t_seen if t_seen is None else t_seen
    if not (0.0 < t_seen < 1.0):
        raise ValueError(f"t_seen must be in (0, 1), got {t_seen}")

    cone = cone_from_fov(q, q_fov, params.h)
    samples, r = sample_cone(cone, k, seed)
    rows = neighbor_point_rows(map, q, q_fov, params.t_d, exclude_client=exclude_client)
    neighbor_positions = map.point_positions[rows]
    redundant = classify_samples(samples, neighbor_positions, r)
    if redundancy_filter is not None:
        redundant = np.asarray(
            redundancy_filter(samples, redundant, neighbor_positions), dtype=bool
        )

    n_red = int(redundant.sum())
    degree = n_red / k
    return OverlapVerdict(
        overlap_degree=degree,
        seen=degree > t_seen,
        redundant_samples=samples[redundant],
        fresh_samples=samples[~redundant],
        r=r,
        sample_count=k,
    )


def overlap_from_response(status: int, listed: int, k: int) -> float:
    """Reconstruct the overlap degree a response implies for a k-sample query."""
    if k < 1:
        raise ValueError(f"sample count must be >= 1, got {k}")
    return listed / k if status == 0 else (k - listed) / k


def freshness_ratio(verdicts) -> float:
    """1 minus the mean overlap degree across a trajectory's assessments."""
    degrees = [v.overlap_degree if isinstance(v, OverlapVerdict) else float(v) for v in verdicts]
    if not degrees:
        raise ValueError("freshness ratio needs at least one verdict")
    return 1.0 - float(np.mean(degrees))
