"""Sliding-window visual-inertial estimator."""
from .problem import (CameraModel, DenseLayout, FrameObservations, LinearPrior, SolveReport,
                      WindowProblem, dense_system, prior_from_information, schur_marginalize,
                      solve_window, window_cost)
from .residuals import (POSE_DIM, STATE_DIM, DepthModel, KeyframeState, depth_residual,
                        depth_residuals, huber, inertial_residual, reprojection_residual,
                        reprojection_residuals)
from .window import (MODES, EstimatorConfig, EstimatorResult, FrameDiagnostics,
                     SlidingWindowEstimator, apply_mask, batch_refine, marginalize_oldest,
                     run_estimator, slide_window)

__all__ = [
    "CameraModel", "DenseLayout", "FrameObservations", "LinearPrior", "SolveReport",
    "WindowProblem", "dense_system", "prior_from_information", "schur_marginalize",
    "solve_window", "window_cost",
    "POSE_DIM", "STATE_DIM", "DepthModel", "KeyframeState", "depth_residual", "depth_residuals",
    "huber", "inertial_residual", "reprojection_residual", "reprojection_residuals",
    "MODES", "EstimatorConfig", "EstimatorResult", "FrameDiagnostics", "SlidingWindowEstimator",
    "apply_mask", "batch_refine", "marginalize_oldest", "run_estimator", "slide_window",
]
