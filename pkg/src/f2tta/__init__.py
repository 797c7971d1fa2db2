"""Online prompt-based adaptation of a frozen ViT classifier to free-form
streams of domain fragments, on a synthetic multi-domain benchmark."""

from .engine import AdaptState, IDiPTConfig, PredictionLog, baseline_entropy_min, baseline_source_only, run_stream
from .errors import ConfigError, F2TTAError, MissingSampleError, ParameterError, ShapeError, TrainingError, UsageError
from .metrics import MetricsReport, auc_score, compute_metrics, segment_accuracy
from .pgd import GraphNet, PromptBank, lowfreq_key
from .prompts import PrefixPrompt
from .streams import StreamManifest, make_stream
from .synth_data import DatasetBundle, DomainSpec, LabeledImage, apply_domain_style, generate_dataset
from .uom import estimate_uncertainty, masked_consistency_loss, select_tokens
from .vit import TinyViT, ViTConfig, train_source

__version__ = "0.1.0"
