"""End-to-end driver: CSV records in, scan verdict and JSON report out.

The driver stitches the library together in five stages: ingest, per-timepoint
covariance estimation, feature-graph construction (estimated from the data or
loaded from a file), the ball scan with permutation calibration, and report
writing. Any stage failure is re-raised as PipelineStageError naming the
stage; a report file is only ever written whole.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from ._kernels_numpy import _avg_ranks
from .geometry import project_to_spd
from .graph import (
    FeatureGraph,
    graph_from_precision,
    graphical_lasso,
    read_graph_file,
    slope_difference_matrix,
    slope_magnitude_matrix,
    tune_lambda_for_density,
)
from .scan import (
    COVARIANCE_KINDS,
    STAT_MODES,
    ScanDataset,
    ScanResult,
    null_quantile,
    run_scan,
)

DEFAULT_TARGET_DENSITY = 0.10
GRAPH_SOURCES = ("difference", "pooled")


@dataclass(frozen=True)
class LongitudinalDataset:
    """Validated per-record longitudinal data with named features.

    features[i] belongs to subject_ids[record_subject[i]] at record_time[i];
    group labels live per subject. rejected_lines lists 1-based CSV line
    numbers dropped for missing values during ingestion.
    """

    feature_names: tuple[str, ...]
    subject_ids: tuple[str, ...]
    features: np.ndarray  # (M, p) float64
    record_subject: np.ndarray  # (M,) int64
    record_time: np.ndarray  # (M,) float64
    subject_group: np.ndarray  # (S,) int8
    rejected_lines: tuple[int, ...] = ()

    def __post_init__(self):
        m, p = self.features.shape
        if p != len(self.feature_names):
            raise ValueError("feature_names length must match feature columns")
        if m != self.record_subject.shape[0] or m != self.record_time.shape[0]:
            raise ValueError("per-record arrays must share one length")
        if len(self.subject_ids) != self.subject_group.shape[0]:
            raise ValueError("one group label per subject required")
        if m == 0:
            raise ValueError("dataset has no accepted records")
        if np.isnan(self.features).any():
            raise ValueError("accepted records must not contain missing values")
        for g in (0, 1):
            if not np.any(self.subject_group == g):
                raise ValueError(f"no subjects with group label {g}")

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)


RESERVED_COLUMNS = ("subject_id", "group", "time")


def ingest_csv(path: str) -> LongitudinalDataset:
    """Parse `subject_id,group,time,<features...>` CSV into a dataset.

    Rows with empty feature cells are dropped and their 1-based line numbers
    recorded on the dataset; non-numeric values, unknown group labels,
    duplicate (subject, time) pairs, and a missing group are hard errors.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row")
        header = [h.strip() for h in header]
        if tuple(header[:3]) != RESERVED_COLUMNS:
            raise ValueError(
                f"{path}: malformed header, expected columns "
                f"{','.join(RESERVED_COLUMNS)},<features...> got {header[:3]}"
            )
        feature_names = tuple(header[3:])
        if not feature_names:
            raise ValueError(f"{path}: header has no feature columns")
        if len(set(feature_names)) != len(feature_names):
            raise ValueError(f"{path}: duplicate feature names in header")

        subject_index: dict[str, int] = {}
        subject_groups: dict[str, int] = {}
        seen_records: dict[tuple[str, float], int] = {}
        rows, subj_idx, times, rejected = [], [], [], []
        for lineno, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} cells, got {len(cells)}"
                )
            sid, group_cell, time_cell = (c.strip() for c in cells[:3])
            if not sid:
                raise ValueError(f"{path}:{lineno}: empty subject_id")
            if group_cell not in ("0", "1"):
                raise ValueError(
                    f"{path}:{lineno}: unknown group label {group_cell!r}, expected 0 or 1"
                )
            group = int(group_cell)
            try:
                t = float(time_cell)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric time {time_cell!r}")
            feature_cells = [c.strip() for c in cells[3:]]
            if any(not c for c in feature_cells):
                rejected.append(lineno)
                continue
            try:
                values = [float(c) for c in feature_cells]
            except ValueError:
                bad = next(c for c in feature_cells if not _is_float(c))
                raise ValueError(f"{path}:{lineno}: non-numeric feature value {bad!r}")
            if any(not np.isfinite(v) for v in values):
                rejected.append(lineno)
                continue

            key = (sid, t)
            if key in seen_records:
                raise ValueError(
                    f"{path}:{lineno}: duplicate (subject, time) record "
                    f"({sid!r}, {t}), first seen at line {seen_records[key]}"
                )
            seen_records[key] = lineno
            if sid not in subject_index:
                subject_index[sid] = len(subject_index)
                subject_groups[sid] = group
            elif subject_groups[sid] != group:
                raise ValueError(
                    f"{path}:{lineno}: subject {sid!r} has conflicting group labels"
                )
            rows.append(values)
            subj_idx.append(subject_index[sid])
            times.append(t)

    if not rows:
        raise ValueError(f"{path}: no usable data rows")
    subject_ids = tuple(subject_index)
    groups = np.array([subject_groups[s] for s in subject_ids], dtype=np.int8)
    for g in (0, 1):
        if not np.any(groups == g):
            raise ValueError(f"{path}: no subjects with group label {g}")
    # drop subjects whose every row was rejected so ids stay dense
    used = np.unique(np.asarray(subj_idx, dtype=np.int64))
    if len(used) != len(subject_ids):
        remap = {old: new for new, old in enumerate(used)}
        subj_idx = [remap[i] for i in subj_idx]
        subject_ids = tuple(subject_ids[i] for i in used)
        groups = groups[used]
    return LongitudinalDataset(
        feature_names=feature_names,
        subject_ids=subject_ids,
        features=np.asarray(rows, dtype=np.float64),
        record_subject=np.asarray(subj_idx, dtype=np.int64),
        record_time=np.asarray(times, dtype=np.float64),
        subject_group=groups,
        rejected_lines=tuple(rejected),
    )


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def to_scan_dataset(dataset: LongitudinalDataset) -> ScanDataset:
    """Index record times against the sorted unique time grid."""
    times = np.unique(dataset.record_time)
    tidx = np.searchsorted(times, dataset.record_time)
    return ScanDataset(
        features=dataset.features,
        row_time_index=tidx.astype(np.int64),
        row_subject=dataset.record_subject,
        subject_group=dataset.subject_group,
        times=times,
    )


def _correlation(x: np.ndarray, kind: str) -> np.ndarray:
    # zero-variance columns get unit diagonal and zero correlation elsewhere
    sd = x.std(axis=0, ddof=1)
    keep = sd > 0
    out = np.eye(x.shape[1])
    if keep.any():
        with np.errstate(invalid="ignore", divide="ignore"):
            sub = np.corrcoef(x[:, keep], rowvar=False)
        out[np.ix_(keep, keep)] = np.atleast_2d(sub)
    return out


def _rank_matrix(x: np.ndarray) -> np.ndarray:
    """Column-wise average ranks (ties share their mean rank)."""
    return np.column_stack([_avg_ranks(x[:, j]) for j in range(x.shape[1])])


def per_timepoint_covariances(
    dataset: LongitudinalDataset,
    group: int | None,
    kind: str = "sample",
    floor: float = 1e-6,
) -> list[tuple[float, np.ndarray, int]]:
    """Per-distinct-time covariance (or correlation) matrices for one group.

    group=None pools all subjects regardless of label. Timepoints with fewer
    than 2 samples are dropped with a warning; fewer than 2 surviving
    timepoints is an error. Every matrix is projected to the SPD cone with
    eigenvalue floor `floor`.
    """
    if kind not in COVARIANCE_KINDS:
        raise ValueError(f"kind must be one of {COVARIANCE_KINDS}")
    groups_per_row = dataset.subject_group[dataset.record_subject]
    label = "pooled" if group is None else f"group {group}"
    out = []
    for t in np.unique(dataset.record_time):
        mask = dataset.record_time == t
        if group is not None:
            mask &= groups_per_row == group
        n_t = int(mask.sum())
        if n_t < 2:
            warnings.warn(
                f"{label} timepoint {t}: {n_t} sample(s), dropped",
                stacklevel=2,
            )
            continue
        x = dataset.features[mask]
        if kind == "sample":
            mat = np.cov(x, rowvar=False, ddof=1)
        elif kind == "pearson":
            mat = _correlation(x, kind)
        else:
            mat = _correlation(_rank_matrix(x), kind)
        out.append((float(t), project_to_spd(np.atleast_2d(mat), floor), n_t))
    if len(out) < 2:
        raise ValueError(
            f"{label}: fewer than 2 timepoints with >= 2 samples"
        )
    return out


@dataclass(frozen=True)
class PipelineConfig:
    """Workflow knobs; lam=None tunes the glasso penalty to target_density."""

    alpha: float = 0.05
    lam: float | None = None
    n_perm: int = 999
    seed: int = 0
    max_radius: int | None = None
    stat_mode: str = "trajectory"
    graph_file: str | None = None
    min_region_edges: int = 1
    covariance_kind: str = "sample"
    target_density: float = DEFAULT_TARGET_DENSITY
    graph_source: str = "difference"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_perm < 1:
            raise ValueError("n_perm must be >= 1")
        if self.stat_mode not in STAT_MODES:
            raise ValueError(f"stat_mode must be one of {STAT_MODES}")
        if self.covariance_kind not in COVARIANCE_KINDS:
            raise ValueError(f"covariance_kind must be one of {COVARIANCE_KINDS}")
        if self.graph_source not in GRAPH_SOURCES:
            raise ValueError(f"graph_source must be one of {GRAPH_SOURCES}")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 < self.target_density < 1:
            raise ValueError("target_density must lie in (0, 1)")


class PipelineStageError(RuntimeError):
    """A pipeline stage failed; .stage names it, .original is the cause."""

    def __init__(self, stage: str, original: BaseException):
        self.stage = stage
        self.original = original
        super().__init__(f"stage {stage}: {original}")


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineStageError:
        raise
    except Exception as err:
        raise PipelineStageError(name, err) from err


def build_feature_graph(
    dataset: LongitudinalDataset, config: PipelineConfig
) -> tuple[FeatureGraph, float | None]:
    """Oracle graph for the scan: from file when given, else glasso on a
    slope matrix. Returns (graph, penalty or None).

    graph_source picks the glasso input: "difference" uses the group
    slope-difference matrix (the published workflow); "pooled" uses label-free
    pooled slope magnitudes. The difference graph targets entries the observed
    labeling made look different, so the permutation critical value (computed
    on the fixed graph) is anti-conservative under the null; prefer "pooled"
    or an external graph_file when calibration matters more than targeting.
    """
    if config.graph_file is not None:
        graph = read_graph_file(config.graph_file, n_vertices=dataset.n_features)
        return graph, None
    if config.graph_source == "pooled":
        ent = per_timepoint_covariances(dataset, None, config.covariance_kind)
        mat = slope_magnitude_matrix(
            [m for _, m, _ in ent], [t for t, _, _ in ent]
        )
    else:
        entries = [
            per_timepoint_covariances(dataset, g, config.covariance_kind)
            for g in (0, 1)
        ]
        mat = slope_difference_matrix(
            [m for _, m, _ in entries[0]],
            [m for _, m, _ in entries[1]],
            [t for t, _, _ in entries[0]],
            [t for t, _, _ in entries[1]],
        )
    if config.lam is None:
        lam, est = tune_lambda_for_density(mat, config.target_density)
    else:
        lam, est = config.lam, graphical_lasso(mat, config.lam)
    return graph_from_precision(est.theta), float(lam)


def run_pipeline(
    dataset: LongitudinalDataset, config: PipelineConfig
) -> tuple[ScanResult, dict]:
    """Full workflow on an ingested dataset; returns (scan result, report).

    The report is a plain sorted-key-JSON-ready dict containing the config
    echo, the graph edge list, every region with raw, standardized, and
    corrected statistics, the critical value, null quantiles, and identified
    regions as feature-name sets.
    """
    with _stage("oracle_graph"):
        graph, lam_used = build_feature_graph(dataset, config)
    with _stage("scan"):
        data = to_scan_dataset(dataset)
        result = run_scan(
            data,
            graph,
            alpha=config.alpha,
            n_perm=config.n_perm,
            seed=config.seed,
            max_radius=config.max_radius,
            mode=config.stat_mode,
            covariance_kind=config.covariance_kind,
            min_region_edges=config.min_region_edges,
        )
    with _stage("report"):
        report = build_report(dataset, config, graph, lam_used, result)
    return result, report


def build_report(
    dataset: LongitudinalDataset,
    config: PipelineConfig,
    graph: FeatureGraph,
    lam_used: float | None,
    result: ScanResult,
) -> dict:
    names = dataset.feature_names
    nulls = result.null_samples
    quantiles = {
        str(level): null_quantile(nulls, 1.0 - level)
        for level in (0.5, 0.9, 0.95, 0.99)
    } if len(nulls) else {}
    return {
        "config": {
            "alpha": config.alpha,
            "lambda": config.lam,
            "n_perm": config.n_perm,
            "seed": config.seed,
            "max_radius": config.max_radius,
            "stat_mode": config.stat_mode,
            "graph_file": config.graph_file,
            "min_region_edges": config.min_region_edges,
            "covariance_kind": config.covariance_kind,
            "target_density": config.target_density,
            "graph_source": config.graph_source,
        },
        "n_subjects": dataset.n_subjects,
        "n_records": int(dataset.features.shape[0]),
        "rejected_lines": list(dataset.rejected_lines),
        "feature_names": list(names),
        "graph": {
            "n_vertices": graph.n_vertices,
            "edges": [[int(u), int(v)] for u, v in graph.edges],
            "lambda_used": lam_used,
            "source": (
                "file"
                if config.graph_file is not None
                else f"glasso_{config.graph_source}"
            ),
        },
        "regions": [
            {
                "center": int(sc.region.center),
                "center_name": names[sc.region.center],
                "radius": int(sc.region.radius),
                "vertices": [int(v) for v in sc.region.vertices],
                "edge_count": int(sc.region.edge_count),
                "raw": sc.raw,
                "standardized": sc.standardized,
                "corrected": sc.corrected,
            }
            for sc in result.regions
        ],
        "critical_value": result.critical_value,
        "null_quantiles": quantiles,
        "observed_max": result.observed_max,
        "rejects": result.rejects,
        "identified": [
            {
                "center_name": names[sc.region.center],
                "vertex_names": [names[v] for v in sc.region.vertices],
                "corrected": sc.corrected,
            }
            for sc in result.identified
        ],
        "seed": config.seed,
    }


def write_report(report: dict, path: str) -> None:
    """Serialize first, then write whole and rename into place."""
    text = json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write("\n")
    os.replace(tmp, path)


REGION_CSV_FIELDS = [
    "center",
    "center_name",
    "radius",
    "edge_count",
    "raw",
    "standardized",
    "corrected",
    "vertices",
]


def write_regions_csv(report: dict, path: str) -> None:
    """Flatten report["regions"] for plotting tools."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REGION_CSV_FIELDS)
        writer.writeheader()
        for region in report["regions"]:
            row = {k: region[k] for k in REGION_CSV_FIELDS if k != "vertices"}
            row["vertices"] = " ".join(str(v) for v in region["vertices"])
            writer.writerow(row)
