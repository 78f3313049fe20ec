"""Delta Activation Layers: temporal-sparsity inference and training in numpy."""

from .delta import (
    ActivationFn,
    DeltaLayerConfig,
    DeltaLayerState,
    PlainActivation,
    QuantMode,
    layer_forward,
    quantize_activation,
)
from .errors import (
    ConfigurationError,
    DalnetError,
    DimensionError,
    DomainError,
    FormatError,
    TrainingDiverged,
    UsageError,
)
from .formats import load_model, load_sequence, read_model, save_model, save_sequence
from .measure import (
    equivalence_check,
    frame_rate_experiment,
    memory_overhead_estimate,
    operation_sparsity,
    per_layer_report,
)
from .network import (
    InferenceSession,
    LayerSpec,
    NetworkSpec,
    ParamSet,
    infer_delta,
    infer_hybrid,
    infer_normal,
    init_params,
    run_sequence,
    toy_cnn,
)
from .synthetic import FrameSequence, SyntheticSceneSpec, generate_sequence, subsample
from .tensor import AvgPool, Conv2D, Dense, OpCounter, SparseEvents, sparse_linear_apply
from .training import TrainConfig, backward, forward_record, sgd_step, train

__version__ = "0.1.0"
