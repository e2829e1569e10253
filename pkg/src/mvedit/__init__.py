"""Consistent multi-view image editing via guided diffusion, at toy scale."""

from .consistency import ConsistencyConfig, ConsistencyLoss, consistency_grad, consistency_loss, consistency_loss_multi
from .diffusion import (GuidanceConfig, MixtureEditModel, NumericalError, apply_backward, guided_eps,
                        make_schedule, one_step_edit, predict_x0, sample)
from .evaluation import MetricsReport, emit_report, heldout_eval, matched_consistency_score, psnr, ssim
from .matching import MatchFilterConfig, MatchSet, filter_matches, load_matches, oracle_matches
from .scene import Scene, View, generate_scene, load_scene, make_texture, render_view, save_scene
from .scheduler import EditSession, edit_scene, order_views, select_neighbors

__all__ = [
    "ConsistencyConfig", "ConsistencyLoss", "consistency_grad", "consistency_loss", "consistency_loss_multi",
    "GuidanceConfig", "MixtureEditModel", "NumericalError", "apply_backward", "guided_eps",
    "make_schedule", "one_step_edit", "predict_x0", "sample",
    "MetricsReport", "emit_report", "heldout_eval", "matched_consistency_score", "psnr", "ssim",
    "MatchFilterConfig", "MatchSet", "filter_matches", "load_matches", "oracle_matches",
    "Scene", "View", "generate_scene", "load_scene", "make_texture", "render_view", "save_scene",
    "EditSession", "edit_scene", "order_views", "select_neighbors",
]
