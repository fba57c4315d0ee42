"""Ball-subgraph scan: enumeration, statistics, permutation null, identification.

The scan walks every ball subgraph B(v, r) of the feature graph, computes a
per-region statistic between the two groups, standardizes it by the region's
degrees of freedom, applies the size correction, and thresholds the maximum
against a permutation null. Identified regions are made vertex-disjoint by
greedy overlap removal.

Heavy lifting (per-permutation, per-region statistics) is delegated to a
numba kernel with a pure-numpy fallback; see :mod:`covscan.backend`.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import backend
from .graph import FeatureGraph
from .stats import chi2_quantile

STAT_MODES = ("trajectory", "product", "glm_slope")
COVARIANCE_KINDS = ("sample", "pearson", "spearman")
CALIBRATIONS = ("permutation", "asymptotic")


@dataclass(frozen=True)
class BallRegion:
    """Ball subgraph B(center, radius): vertices within graph distance radius.

    edges holds the induced edges on the host graph; the region statistic is
    a sum of one squared slope-difference coordinate per edge, which is what
    makes edge_count the standardization degrees of freedom.
    """

    center: int
    radius: int
    vertices: tuple[int, ...]  # sorted
    edge_count: int
    edges: tuple[tuple[int, int], ...]  # induced, (u, v) with u < v, sorted

    def __post_init__(self):
        if tuple(sorted(self.vertices)) != self.vertices:
            raise ValueError("vertices must be sorted")
        if self.center not in self.vertices:
            raise ValueError("center must belong to the region")
        if len(self.edges) != self.edge_count:
            raise ValueError("edge_count must equal the number of edges")
        vset = set(self.vertices)
        for u, v in self.edges:
            if not (u < v and u in vset and v in vset):
                raise ValueError("edges must be (u, v) pairs with u < v inside the region")


@dataclass(frozen=True)
class RegionScore:
    region: BallRegion
    raw: float
    standardized: float
    corrected: float


@dataclass(frozen=True)
class ScanResult:
    regions: tuple[RegionScore, ...]
    critical_value: float
    null_samples: np.ndarray  # sorted per-permutation maxima (empty if asymptotic)
    identified: tuple[RegionScore, ...]
    alpha: float
    seed: int
    observed_max: float

    @property
    def rejects(self) -> bool:
        return self.observed_max > self.critical_value


@dataclass(frozen=True)
class ScanDataset:
    """Row-per-record longitudinal data, ready for the scan kernels.

    features[i] is the p-vector observed for subject row_subject[i] at time
    times[row_time_index[i]]; subject_group holds the observed 0/1 labels.
    """

    features: np.ndarray  # (M, p) float64
    row_time_index: np.ndarray  # (M,) int64 into times
    row_subject: np.ndarray  # (M,) int64
    subject_group: np.ndarray  # (S,) int8
    times: np.ndarray  # (T,) float64, strictly increasing

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_subjects(self) -> int:
        return self.subject_group.shape[0]


# ---------------------------------------------------------------------------
# Ball enumeration
# ---------------------------------------------------------------------------


def _bfs_distances(graph: FeatureGraph, source: int, cutoff: int) -> dict[int, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        if dist[u] >= cutoff:
            continue
        for v in graph.adjacency[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def induced_edges(graph: FeatureGraph, vertices) -> tuple[tuple[int, int], ...]:
    vset = set(vertices)
    return tuple(
        sorted((u, v) for u in vset for v in graph.adjacency[u] if v > u and v in vset)
    )


def induced_edge_count(graph: FeatureGraph, vertices) -> int:
    return len(induced_edges(graph, vertices))


def _edge_counts_by_radius(graph: FeatureGraph, source: int) -> list[int]:
    """edge_counts[r] = |E(B(source, r))| for r = 0..eccentricity(source)."""
    dist = _bfs_distances(graph, source, graph.n_vertices)
    ecc = max(dist.values())
    by_radius = sorted(dist.items(), key=lambda kv: (kv[1], kv[0]))
    members: list[int] = []
    counts = []
    i = 0
    for r in range(ecc + 1):
        while i < len(by_radius) and by_radius[i][1] <= r:
            members.append(by_radius[i][0])
            i += 1
        counts.append(induced_edge_count(graph, members))
    return counts


def enumerate_balls(graph: FeatureGraph, max_radius: int | None = None) -> list[BallRegion]:
    """All distinct ball subgraphs up to max_radius (default: eccentricity).

    One BFS per vertex; duplicate vertex sets are removed (first occurrence
    wins, scanning centers in index order and radii ascending), and
    single-vertex regions are dropped since they carry no edges.
    """
    if graph.n_vertices == 0:
        raise ValueError("graph is empty")
    cutoff = max_radius if max_radius is not None else graph.n_vertices
    seen: set[tuple[int, ...]] = set()
    out: list[BallRegion] = []
    for v in range(graph.n_vertices):
        dist = _bfs_distances(graph, v, cutoff)
        ecc = max(dist.values())
        by_radius = sorted(dist.items(), key=lambda kv: (kv[1], kv[0]))
        members: list[int] = []
        i = 0
        for r in range(0, ecc + 1):
            while i < len(by_radius) and by_radius[i][1] <= r:
                members.append(by_radius[i][0])
                i += 1
            verts = tuple(sorted(members))
            if len(verts) < 2 or verts in seen:
                continue
            seen.add(verts)
            edges = induced_edges(graph, verts)
            if not edges:
                continue
            out.append(
                BallRegion(
                    center=v,
                    radius=r,
                    vertices=verts,
                    edge_count=len(edges),
                    edges=edges,
                )
            )
    return out


def subgraph_distance(r1: BallRegion, r2: BallRegion, graph: FeatureGraph) -> float:
    """Edge-overlap distance 1 - |E1 & E2| / sqrt(|E1| |E2|) on a host graph."""

    def edges(region: BallRegion) -> set[tuple[int, int]]:
        vset = set(region.vertices)
        found = {
            (u, v)
            for u in vset
            for v in graph.adjacency[u]
            if v > u and v in vset
        }
        if len(found) != region.edge_count:
            raise ValueError("region does not belong to this host graph")
        return found

    e1, e2 = edges(r1), edges(r2)
    if not e1 or not e2:
        raise ValueError("regions must carry at least one edge")
    return 1.0 - len(e1 & e2) / np.sqrt(len(e1) * len(e2))


def avocado_check(
    graph: FeatureGraph, h: float, s: float
) -> tuple[bool, tuple[int, int, int] | None]:
    """Exhaustive check of the ball-density condition.

    For every vertex v, radius r up to its eccentricity, and r' in
    [ceil(r/2), r], require
        |E(B(v,r'))| / |E(B(v,r))| >= h * (1 - |E(B(v,r-r'))| / |E(B(v,r))|)^s.
    Returns (passed, worst_violation) with the worst (v, r, r') by margin;
    radii whose balls carry no edges are skipped. Diagnostics only: the scan
    itself never gates on this condition.
    """
    if h <= 0 or s <= 0:
        raise ValueError("h and s must be positive")
    worst = None
    worst_margin = 0.0
    # Equality cases (e.g. ring graphs) sit exactly on the boundary in exact
    # arithmetic; allow rounding slack so they are not flagged.
    tol = 1e-12
    for v in range(graph.n_vertices):
        edge_by_radius = _edge_counts_by_radius(graph, v)
        for r in range(1, len(edge_by_radius)):
            er = edge_by_radius[r]
            if er == 0:
                continue
            for rp in range(int(np.ceil(r / 2)), r + 1):
                lhs = edge_by_radius[rp] / er
                rhs = h * (1.0 - edge_by_radius[r - rp] / er) ** s
                margin = rhs - lhs
                if margin > tol * (1.0 + abs(rhs)) and margin > worst_margin:
                    worst_margin = margin
                    worst = (v, r, rp)
    return worst is None, worst


# ---------------------------------------------------------------------------
# Statistics plumbing
# ---------------------------------------------------------------------------


def size_correct(standardized: float, region_edges: int, total_edges: int) -> float:
    """Apply the scan-size penalty: standardized - 2 sqrt(log(|E| / |E(R)|))."""
    if region_edges < 1:
        raise ValueError("region_edges must be >= 1")
    if region_edges > total_edges:
        raise ValueError("region_edges cannot exceed total_edges")
    return standardized - 2.0 * np.sqrt(np.log(total_edges / region_edges))


def permutation_labels(data: ScanDataset, n_perm: int, seed: int) -> np.ndarray:
    """Observed labels plus n_perm subject-wise shuffles, shape (n_perm+1, S).

    Row 0 is the observed labeling. Each permutation row k is drawn from
    np.random.default_rng([seed, k]) by shuffling labels within strata of
    identical subject time profiles (the per-timepoint row counts of a
    subject). Subjects observed at different timepoints are not
    design-exchangeable: swapping their labels changes per-cell group sizes,
    and statistics that scale by those sizes then see a shifted null.
    Stratifying keeps every (timepoint, group) cell count identical across
    permutations, which restores exactness for any statistic. In a fully
    longitudinal design all subjects share one profile and this is the plain
    uniform shuffle.
    """
    observed = np.asarray(data.subject_group, dtype=np.int8)
    if observed.min() < 0 or observed.max() > 1:
        raise ValueError("group labels must be 0/1")
    if np.sum(observed == 0) < 2 or np.sum(observed == 1) < 2:
        raise ValueError("need at least 2 subjects per group")

    n_times = len(data.times)
    # rows per (timepoint, subject), fixed across permutations
    rows_ts = np.zeros((n_times, data.n_subjects), dtype=np.int64)
    np.add.at(rows_ts, (data.row_time_index, data.row_subject), 1)

    for g in (0, 1):
        counts = rows_ts[:, observed == g].sum(axis=1)
        if np.sum(counts >= 2) < 2:
            raise ValueError(
                "observed labeling leaves a group with fewer than 2 usable timepoints"
            )

    strata: dict[tuple, np.ndarray] = {}
    for key in sorted({tuple(rows_ts[:, s]) for s in range(data.n_subjects)}):
        members = np.flatnonzero([tuple(rows_ts[:, s]) == key for s in range(data.n_subjects)])
        strata[key] = members
    if not any(len(np.unique(observed[idx])) > 1 for idx in strata.values()):
        raise ValueError(
            "labels cannot move: no two subjects with identical time profiles "
            "carry different group labels, so the permutation null is degenerate"
        )

    labels = np.empty((n_perm + 1, data.n_subjects), dtype=np.int8)
    labels[0] = observed
    for k in range(1, n_perm + 1):
        rng = np.random.default_rng([seed, k])
        cand = observed.copy()
        for idx in strata.values():
            cand[idx] = observed[idx][rng.permutation(len(idx))]
        labels[k] = cand
    return labels


def _regions_to_csr(
    regions: list[BallRegion],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Flatten regions for the kernels: vertex CSR plus edge CSR.

    Edge endpoints are local positions within the region's sorted vertex
    tuple, so the kernels can index the restricted k x k matrices directly.
    """
    offsets = np.zeros(len(regions) + 1, dtype=np.int64)
    eoffsets = np.zeros(len(regions) + 1, dtype=np.int64)
    for i, reg in enumerate(regions):
        offsets[i + 1] = offsets[i] + len(reg.vertices)
        eoffsets[i + 1] = eoffsets[i] + len(reg.edges)
    verts = np.empty(offsets[-1], dtype=np.int64)
    edge_u = np.empty(eoffsets[-1], dtype=np.int64)
    edge_v = np.empty(eoffsets[-1], dtype=np.int64)
    for i, reg in enumerate(regions):
        verts[offsets[i] : offsets[i + 1]] = reg.vertices
        local = {u: a for a, u in enumerate(reg.vertices)}
        for j, (u, v) in enumerate(reg.edges):
            edge_u[eoffsets[i] + j] = local[u]
            edge_v[eoffsets[i] + j] = local[v]
    return verts, offsets, edge_u, edge_v, eoffsets


def compute_scan_statistics(
    data: ScanDataset,
    regions: list[BallRegion],
    labels: np.ndarray,
    mode: str = "trajectory",
    covariance_kind: str = "sample",
    spd_floor: float = 1e-6,
    karcher_step: float = 1.0,
    karcher_max_iter: int = 200,
    karcher_tol: float = 1e-9,
) -> np.ndarray:
    """Raw region statistics for every labeling row; shape (n_labelings, R).

    Work items (labeling, region) are independent; the kernel may evaluate
    them in any order or in parallel, and results are written to fixed slots,
    so the output is bit-identical for any worker count.
    """
    if mode not in STAT_MODES:
        raise ValueError(f"unknown stat mode {mode!r}; expected one of {STAT_MODES}")
    if covariance_kind not in COVARIANCE_KINDS:
        raise ValueError(
            f"unknown covariance kind {covariance_kind!r}; expected one of {COVARIANCE_KINDS}"
        )
    if mode == "product" and covariance_kind != "sample":
        raise ValueError(
            "product mode is a covariance likelihood ratio; correlation kinds are not supported"
        )
    reg_verts, reg_offsets, edge_u, edge_v, edge_offsets = _regions_to_csr(regions)
    order = np.argsort(data.row_time_index, kind="stable")
    xs = np.ascontiguousarray(data.features[order], dtype=np.float64)
    row_subject = np.ascontiguousarray(data.row_subject[order]).astype(np.int64)
    time_counts = np.bincount(data.row_time_index, minlength=len(data.times))
    time_offsets = np.zeros(len(data.times) + 1, dtype=np.int64)
    np.cumsum(time_counts, out=time_offsets[1:])

    kern = backend.get_kernels()
    return kern.region_stats(
        xs,
        time_offsets,
        row_subject,
        np.ascontiguousarray(labels.astype(np.int8)),
        np.asarray(data.times, dtype=np.float64),
        reg_verts,
        reg_offsets,
        edge_u,
        edge_v,
        edge_offsets,
        STAT_MODES.index(mode),
        COVARIANCE_KINDS.index(covariance_kind),
        float(spd_floor),
        float(karcher_step),
        int(karcher_max_iter),
        float(karcher_tol),
    )


def region_statistic(
    region: BallRegion,
    samples1,
    times1,
    samples2,
    times2,
    mode: str = "trajectory",
    covariance_kind: str = "sample",
    spd_floor: float = 1e-6,
) -> float:
    """Standardized statistic for one region from per-group raw samples.

    samples_g is a sequence of (m_t, p) arrays aligned with times_g. The raw
    statistic is standardized as (raw - df) / sqrt(df) with df the region's
    edge count, matching the raw statistic's one-coordinate-per-edge
    construction. Failures are re-raised with the region identity attached.
    """
    if region.edge_count < 1:
        raise ValueError("region must carry at least one edge")
    rows = []
    tidx = []
    subj = []
    groups = []
    all_times = np.unique(np.concatenate([np.asarray(times1), np.asarray(times2)]))
    s = 0
    for g, (samples, times) in enumerate(((samples1, times1), (samples2, times2))):
        if len(samples) != len(times):
            raise ValueError(f"group {g + 1}: {len(samples)} blocks for {len(times)} times")
        for block, t in zip(samples, times):
            block = np.atleast_2d(np.asarray(block, dtype=np.float64))
            ti = int(np.searchsorted(all_times, t))
            for row in block:
                rows.append(row)
                tidx.append(ti)
                subj.append(s)
                groups.append(g)
                s += 1
    data = ScanDataset(
        features=np.array(rows),
        row_time_index=np.array(tidx, dtype=np.int64),
        row_subject=np.array(subj, dtype=np.int64),
        subject_group=np.array(groups, dtype=np.int8),
        times=all_times.astype(np.float64),
    )
    labels = data.subject_group[None, :]
    try:
        raw = compute_scan_statistics(
            data,
            [region],
            labels,
            mode=mode,
            covariance_kind=covariance_kind,
            spd_floor=spd_floor,
        )[0, 0]
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        raise RuntimeError(
            f"region statistic failed for B({region.center}, {region.radius}): {exc}"
        ) from exc
    df = float(region.edge_count)
    return float((raw - df) / np.sqrt(df))


def identify_regions(scored: list[RegionScore], q_alpha: float) -> list[RegionScore]:
    """Greedy overlap removal: best surviving region first, drop vertex overlaps.

    Ties on the corrected statistic prefer the most localized region:
    smaller edge count, then smaller center id, then smaller radius. Output
    is ordered by corrected statistic descending.
    """
    candidates = [s for s in scored if s.corrected > q_alpha]
    candidates.sort(
        key=lambda s: (
            -s.corrected,
            s.region.edge_count,
            s.region.center,
            s.region.radius,
        )
    )
    chosen: list[RegionScore] = []
    used: set[int] = set()
    for cand in candidates:
        if used.isdisjoint(cand.region.vertices):
            chosen.append(cand)
            used.update(cand.region.vertices)
    return chosen


def null_quantile(null_maxima: np.ndarray, alpha: float) -> float:
    """The (1 - alpha) empirical quantile of the permutation maxima."""
    if len(null_maxima) == 0:
        raise ValueError("need at least one permutation maximum")
    return float(np.quantile(null_maxima, 1.0 - alpha, method="higher"))


def _asymptotic_critical_value(
    regions: list[BallRegion], dfs: np.ndarray, penalties: np.ndarray, alpha: float
) -> float:
    """Bonferroni chi-square critical value: a single threshold whose
    exceedance implies the region is individually significant at
    alpha / n_regions.

    Conservative by construction; the permutation calibration is the default
    and the reference.
    """
    level = 1.0 - alpha / len(regions)
    thresholds = [
        (chi2_quantile(level, dfs[i]) - dfs[i]) / np.sqrt(dfs[i]) - penalties[i]
        for i in range(len(regions))
    ]
    return float(max(thresholds))


def _check_asymptotic_applicable(data: ScanDataset, regions: list[BallRegion]) -> None:
    """Asymptotic mode needs >= 10 * region size samples per group-timepoint."""
    k_max = max(len(r.vertices) for r in regions)
    n_times = len(data.times)
    counts = np.zeros((n_times, 2), dtype=np.int64)
    groups = data.subject_group[data.row_subject]
    np.add.at(counts, (data.row_time_index, groups.astype(np.int64)), 1)
    if counts.min() < 10 * k_max:
        raise ValueError(
            "asymptotic calibration needs >= 10 * region size samples per "
            f"group-timepoint cell (min cell {counts.min()}, largest region {k_max}); "
            "use permutation calibration"
        )


def run_scan(
    data: ScanDataset,
    graph: FeatureGraph,
    alpha: float = 0.05,
    n_perm: int = 999,
    seed: int = 0,
    max_radius: int | None = None,
    mode: str = "trajectory",
    covariance_kind: str = "sample",
    calibration: str = "permutation",
    min_region_edges: int = 1,
    spd_floor: float = 1e-6,
    karcher_max_iter: int = 200,
    karcher_tol: float = 1e-9,
    regions: list[BallRegion] | None = None,
) -> ScanResult:
    """End-to-end scan: enumerate, score, calibrate, identify."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    if calibration not in CALIBRATIONS:
        raise ValueError(
            f"unknown calibration {calibration!r}; expected one of {CALIBRATIONS}"
        )
    if regions is None:
        regions = enumerate_balls(graph, max_radius)
    regions = [r for r in regions if r.edge_count >= max(1, min_region_edges)]
    if not regions:
        raise ValueError("no scannable regions (every candidate ball lacks edges)")
    total_edges = graph.edge_count

    dfs = np.array([float(r.edge_count) for r in regions])
    edge_counts = np.array([r.edge_count for r in regions], dtype=np.float64)
    penalties = 2.0 * np.sqrt(np.log(total_edges / edge_counts))

    if calibration == "asymptotic":
        _check_asymptotic_applicable(data, regions)
        labels = data.subject_group[None, :].astype(np.int8)
    else:
        labels = permutation_labels(data, n_perm, seed)

    raw = compute_scan_statistics(
        data,
        regions,
        labels,
        mode=mode,
        covariance_kind=covariance_kind,
        spd_floor=spd_floor,
        karcher_max_iter=karcher_max_iter,
        karcher_tol=karcher_tol,
    )
    standardized = (raw - dfs[None, :]) / np.sqrt(dfs[None, :])
    corrected = standardized - penalties[None, :]

    if calibration == "asymptotic":
        null_maxima = np.empty(0)
        q_alpha = _asymptotic_critical_value(regions, dfs, penalties, alpha)
    else:
        null_maxima = np.sort(corrected[1:].max(axis=1))
        q_alpha = null_quantile(null_maxima, alpha)

    scored = [
        RegionScore(
            region=reg,
            raw=float(raw[0, i]),
            standardized=float(standardized[0, i]),
            corrected=float(corrected[0, i]),
        )
        for i, reg in enumerate(regions)
    ]
    identified = identify_regions(scored, q_alpha)
    return ScanResult(
        regions=tuple(scored),
        critical_value=q_alpha,
        null_samples=null_maxima,
        identified=tuple(identified),
        alpha=alpha,
        seed=seed,
        observed_max=float(corrected[0].max()),
    )
