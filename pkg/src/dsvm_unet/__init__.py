"""VSS U-Net segmentation with projection and progressive self-distillation."""

from .complexity import ComplexityReport, complexity_report, count_parameters, estimate_flops
from .data import AugmentConfig, Sample, SynthConfig, generate_synthetic, load_dataset
from .distill import DistillConfig, DistillHeads, progressive_loss, progressive_terms, projection_loss, projection_terms
from .engine import TrainConfig, cosine_lr, evaluate, run_ablation, train
from .losses import LossWeights, bcedice_loss, cedice_loss, total_loss
from .metrics import MetricReport, binary_report, hd95, multiclass_report, segmentation_metrics
from .network import DSVMUNet, FeaturePyramid, ModelConfig
from .ssm import ContractError, SS2D, SSMParams, ScanInput, VSSBlock, selective_scan, vss_block_forward

__version__ = "0.1.0"
