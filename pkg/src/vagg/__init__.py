"""Post-detection proposal selection and confidence-guided cross-frame aggregation."""
from .config import PipelineConfig, load_config_file
from .errors import (ConfigError, DataError, FormatError, NumericError, SchemaError, StateError,
                     VaggError)
from .fam import (AggregationBatch, FamWeights, OpCounter, affinity_attention, average_pool_refs,
                  build_score_matrices, classify, cosine_select, fam_forward, layernorm_rows,
                  reference_ranking, scaled_dot_attention_logits)
from .fsm import FrameFeatureSet, select_features, top_k_select
from .geometry import BoundingBox, iou, nms
from .pipeline import Detection, ablate, ap50, count_ops, run_keyframe, run_stream
from .sampling import sample_global, sample_local
from .stream import DensePrediction, FrameRecord, GroundTruthBox, read_feature_stream, write_feature_stream
from .synth import SynthConfig, generate
from .train import backward, forward_loss, train

__version__ = "0.1.0"
