"""Histogram-based Newton regression-tree engine."""

from dgbm.gbt.binning import BinMapper, BinnedDataset, build_bins
from dgbm.gbt.tree import Tree, TreeParams, grow_tree, grow_tree_with_leaves, predict_tree

__all__ = [
    "BinMapper",
    "BinnedDataset",
    "Tree",
    "TreeParams",
    "build_bins",
    "grow_tree",
    "grow_tree_with_leaves",
    "predict_tree",
]
