"""Layout similarity with a graph matching network trained on IoU weak labels."""

from .graph import LayoutGraph, build_graph, mask_semantics
from .layout import Element, Layout, LayoutError, layout_iou, load_layouts, parse_layout, rasterize
from .model import ModelParams, init_params, load_checkpoint, match_pair, pair_distance, save_checkpoint
from .numerics import DimensionError, NumericError
from .retrieval import iou_rank, overlap_at_k, precision_at_k, rank, triplet_accuracy
from .synth import synth_generate
from .training import TrainConfig, Triplet, mine_triplets, train, triplet_loss
from .transfer import attention_match, pixel_overlap_match

__version__ = "0.1.0"

__all__ = [
    "DimensionError",
    "Element",
    "Layout",
    "LayoutError",
    "LayoutGraph",
    "ModelParams",
    "NumericError",
    "TrainConfig",
    "Triplet",
    "attention_match",
    "build_graph",
    "init_params",
    "iou_rank",
    "layout_iou",
    "load_checkpoint",
    "load_layouts",
    "mask_semantics",
    "match_pair",
    "mine_triplets",
    "overlap_at_k",
    "pair_distance",
    "parse_layout",
    "pixel_overlap_match",
    "precision_at_k",
    "rank",
    "rasterize",
    "save_checkpoint",
    "synth_generate",
    "train",
    "triplet_loss",
    "triplet_accuracy",
]
