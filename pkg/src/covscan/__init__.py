"""covscan: localize group differences in longitudinal covariance structure.

The package fits geodesic regressions of covariance matrices over time on the
SPD manifold, then scans ball subgraphs of a feature-interaction graph with a
size-corrected scan statistic to find feature subsets whose covariance
trajectories differ between two groups.
"""

__version__ = "0.1.0"

from . import geometry, graph, regression, scan, simulate, stats
from .graph import FeatureGraph, graphical_lasso, make_graph, read_graph_file
from .pipeline import (
    LongitudinalDataset,
    PipelineConfig,
    PipelineStageError,
    ingest_csv,
    run_pipeline,
    write_report,
)
from .regression import TrajectoryFit, fit_lcglm
from .scan import BallRegion, ScanDataset, ScanResult, enumerate_balls, run_scan
from .simulate import SimConfig, gen_group_data, run_baseline_comparison, run_detection_grid

__all__ = [
    "BallRegion",
    "FeatureGraph",
    "LongitudinalDataset",
    "PipelineConfig",
    "PipelineStageError",
    "ScanDataset",
    "ScanResult",
    "SimConfig",
    "TrajectoryFit",
    "__version__",
    "enumerate_balls",
    "fit_lcglm",
    "gen_group_data",
    "geometry",
    "graph",
    "graphical_lasso",
    "ingest_csv",
    "make_graph",
    "read_graph_file",
    "regression",
    "run_baseline_comparison",
    "run_detection_grid",
    "run_pipeline",
    "run_scan",
    "scan",
    "simulate",
    "stats",
    "write_report",
]
