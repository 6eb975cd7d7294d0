"""eoslab: a desk-scale testbed for end-of-sequence decision analysis and
hallucination mitigation in tiny multimodal caption models."""

__version__ = "0.1.0"

from .scenegen import (  # noqa: F401
    DatasetConfig, Example, FeatureGrid, ObjectInstance, PerceptionConfig,
    Scene, SceneConfig, Vocab, build_dataset, build_vocab, gen_caption,
    gen_scene, load_dataset, make_example, render_features, save_dataset,
)
from .model import (  # noqa: F401
    DecodeConfig, ForwardTrace, Model, ModelConfig, eos_probability, forward,
    generate, init_params, load_checkpoint, loss_and_grads, save_checkpoint,
)
from .objectives import ObjectiveSpec, combined_loss, mle_loss, selective_loss  # noqa: F401
from .scoring import FilterPlan, ScoreTriple, filter_dataset, score_dataset, score_example  # noqa: F401
from .hallmetrics import EvalReport, OmissionReport, chair_eval, extract_objects, omission_analysis, truncate_baseline  # noqa: F401
from .probes import Manipulation, SaliencyReport, TendencyCurve, aggregation_pattern, flow_proportions, manipulate, saliency, tendency_curve  # noqa: F401
from .training import TrainConfig, TrainingLog, track_eos, train  # noqa: F401
