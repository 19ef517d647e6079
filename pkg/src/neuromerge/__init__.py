"""neuromerge: structured pruning with neuron merging.

Removed neurons are absorbed into the next layer through a scaling matrix
that commutes with ReLU, so the compressed model keeps the pruned
topology while approximating the original model's activations without
fine-tuning.
"""

from .criteria import Criterion, keep_count_for_ratio, neuron_view, score_neurons, select_retained
from .decompose import (
    BnContext,
    Decomposition,
    SimilarityResult,
    build_scaling_matrix,
    check_scaling_matrix,
    decompose_conv,
    decompose_fc,
    most_similar,
    most_similar_bn,
)
from .errors import (
    ConfigError,
    DegenerateInputError,
    ModelFormatError,
    NeuroMergeError,
    ShapeError,
    ValidationError,
)
from .evaluate import EvalReport, accuracy, dump_feature_maps, evaluate, final_response_layer, forward, ware
from .io import load_dataset, load_model, save_dataset, save_model
from .merge import (
    MergeConfig,
    MergeReport,
    apply,
    eligible_layers,
    merge_conv_fc_boundary,
    merge_conv_pair,
    merge_fc_pair,
    slice_bn,
)
from .model import (
    AvgPool2d,
    BatchNorm,
    Conv2d,
    Dataset,
    Flatten,
    FullyConnected,
    MaxPool2d,
    Network,
    Output,
    ReLU,
    ResidualBlock,
    infer_shapes,
    networks_equal,
    parameter_count,
    validate,
)
from .tensor import cosine_similarity, l2_norm, n_mode_product, relu, tensor_conv

__version__ = "0.1.0"
