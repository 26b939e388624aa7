"""Attention forecaster + boosted-tree adjuster for short-horizon weather nowcasting."""

from .dataio import SplitSpec, TimeSeriesTable, WindowSet, make_windows
from .gbt import BoostedTreeModel, GBTConfig, fit_gbt, predict_gbt
from .pipeline import BTTFConfig, BTTFModel, feedback_loop, predict_bttf, train_bttf
from .visionary import VisionaryConfig, VisionaryModel, train_visionary

__version__ = "0.1.0"

__all__ = [
    "BTTFConfig", "BTTFModel", "BoostedTreeModel", "GBTConfig", "SplitSpec", "TimeSeriesTable",
    "VisionaryConfig", "VisionaryModel", "WindowSet", "feedback_loop", "fit_gbt", "make_windows",
    "predict_bttf", "predict_gbt", "train_bttf", "train_visionary",
]
