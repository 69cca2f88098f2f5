"""Monocular depth estimation through a language-model backbone.

Vision patches are reprogrammed onto text prototypes, prefixed with
statistics-driven prompts, encoded by a text transformer and decoded to
dense depth by an upsampling head. Backbones are adapted with LoRA and the
model is trained with a scale-invariant log loss.
"""

from .apg import PromptBundle, Tokenizer, build_prompt_bundle, classify_image, compute_pixel_stats
from .backbone import BackboneConfig, init_backbones
from .dataset import DepthMap, SceneSample, SplitSpec, generate_synthetic_scene, make_split, patchify
from .errors import LlmMdeError
from .experiments import ExperimentConfig, RunRecord, run_experiment
from .head import HeadConfig, head_forward, to_metric_depth
from .lora import LoraAdapter, effective_weight, init_adapter, merge_adapter, trainable_param_count
from .metrics import MetricsReport, compute_metrics
from .model import LlmMde, LoraSettings, ModelConfig
from .reprogramming import derive_prototypes, fuse, reprogram
from .training import TrainConfig, cosine_lr, early_stop_step, fit, ssi_loss, ssi_loss_grad

__version__ = "0.1.0"
