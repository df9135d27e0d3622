"""Point cloud segmentation from a handful of labeled vertices per scene.

Self-supervised encoder pretraining, mesh geodesics and spectral clustering,
dropout uncertainty, and pseudo-labels chosen by two-component mixture fits.
"""

from .scene import (PLYError, LabelError, SceneMesh, SparseLabelSet, PredictionField, PseudoLabelSet,
                    load_scene, save_scene, load_sparse_labels, save_sparse_labels,
                    load_pseudo_labels, save_pseudo_labels)
from .bottleneck import VBConfig, EncoderParams, init_encoder, pretrain, finetune_epoch, vb_loss
from .mixtures import fit_mixture_em, MixtureModel
from .harvest import (PipelineConfig, PipelineError, run_pipeline, harvest_pseudo_labels,
                      mc_dropout_uncertainty, evaluate_segmentation)

__version__ = "0.1.0"
