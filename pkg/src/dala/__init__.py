"""dala: dual-activated lightweight channel-attention networks with
dynamic-threshold Grad-CAM explanations and imbalance-aware evaluation.

The public surface groups into:

* tensors and layers: :class:`Tensor`, :mod:`dala.functional`,
  :class:`Backbone`, :class:`ChannelAttention`;
* the estimator API: :class:`AttentionResNetClassifier`,
  :class:`CamExplainer` (scikit-learn conventions);
* the CAM engine: :func:`gradcam`, :func:`dt_gradcam`,
  :class:`DtGradCamConfig`;
* data and training: :func:`generate_synthetic`, :func:`stratified_split`,
  :class:`TrainConfig`, :func:`train`, :func:`stage_sweep`;
* metrics: :func:`classification_report`, :func:`heatmap_metrics`.
"""

from .blocks import (
    Backbone,
    BackboneConfig,
    ChannelAttention,
    ResidualBlock,
    insert_attention,
    toy_backbone_config,
)
from .cam import CamMap, DtGradCamConfig, dt_gradcam, gradcam
from .checkpoint import load_model, save_model
from .data import (
    AugmentSpec,
    DatasetManifest,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    scan_directory,
    stratified_split,
)
from .estimator import AttentionResNetClassifier, CamExplainer
from .metrics import (
    ConfusionMatrix,
    classification_report,
    confusion,
    heatmap_metrics,
)
from .optim import Adam
from .tensor import Tensor, no_grad
from .training import TrainConfig, TrainReport, evaluate, stage_sweep, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AttentionResNetClassifier",
    "AugmentSpec",
    "Backbone",
    "BackboneConfig",
    "CamExplainer",
    "CamMap",
    "ChannelAttention",
    "ConfusionMatrix",
    "DatasetManifest",
    "DtGradCamConfig",
    "ResidualBlock",
    "SplitSpec",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "TrainReport",
    "classification_report",
    "confusion",
    "dt_gradcam",
    "evaluate",
    "generate_synthetic",
    "gradcam",
    "heatmap_metrics",
    "insert_attention",
    "load_model",
    "no_grad",
    "save_model",
    "scan_directory",
    "stage_sweep",
    "stratified_split",
    "toy_backbone_config",
    "train",
    "__version__",
]
