"""Multi-time-scale sequence recommender with planted-pattern benchmarks."""

from .autodiff import GradCheckReport, ShapeError, Tape, Tensor, grad_check
from .data import (
    ColumnSchema,
    DataError,
    Event,
    PurchaseLog,
    Split,
    TimeScale,
    Transaction,
    TransactionSequence,
    bucket_by_scale,
    parse_purchase_log,
    split_leave_last,
)
from .evaluation import (
    MetricReport,
    evaluate,
    hit_at_k,
    ndcg_at_k,
    paired_t_test,
    pop_baseline,
    rank_items,
)
from .joining import JoinParams, join
from .model import ScaleModelParams, ScaleState, forward_sequence
from .synthetic import (
    SyntheticSpec,
    generate_synthetic,
    measure_repurchase_rate,
)
from .training import (
    LossWeights,
    TrainConfig,
    TrainedModel,
    TrainResult,
    total_loss,
    train,
    weighted_ce,
)

__version__ = "0.1.0"
