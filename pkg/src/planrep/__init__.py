"""Query-plan representation learning toolkit.

A small numpy-backed stack: a tape-based autodiff core (`numerics`), a
query-plan tree model and JSON schema (`plans`), the node feature encoder
(`encoding`), tree models producing graph-level embeddings (`models`), the
cost head with its training loop (`estimator`), evaluation metrics
(`metrics`), and a synthetic workload with an analytic latency oracle
(`workload`).
"""

from . import encoding, estimator, metrics, models, numerics, plans, workload
from .encoding import GraphBatch, encode_plan, raw_plan_features
from .estimator import (
    Checkpoint,
    LabelScaler,
    Predictor,
    TrainConfig,
    fit,
    kfold,
    load_checkpoint,
    predict_latency_ms,
    save_checkpoint,
)
from .metrics import plan_suboptimality, q_error, quantile_report, spearman
from .models import MODEL_KINDS, ModelConfig, forward
from .numerics import Parameter, Tape, Tensor, adam_step, backward, grad_check
from .plans import Catalog, PlanNode, PlanTree, Predicate, binarize, parse_plan_json, postorder
from .workload import GenConfig, gen_candidate_set, gen_catalog, gen_dataset, gen_plan, oracle_latency

__version__ = "0.1.0"

__all__ = [
    "encoding", "estimator", "metrics", "models", "numerics", "plans", "workload",
    "GraphBatch", "encode_plan", "raw_plan_features",
    "Checkpoint", "LabelScaler", "Predictor", "TrainConfig", "fit", "kfold",
    "load_checkpoint", "predict_latency_ms", "save_checkpoint",
    "plan_suboptimality", "q_error", "quantile_report", "spearman",
    "MODEL_KINDS", "ModelConfig", "forward",
    "Parameter", "Tape", "Tensor", "adam_step", "backward", "grad_check",
    "Catalog", "PlanNode", "PlanTree", "Predicate", "binarize", "parse_plan_json", "postorder",
    "GenConfig", "gen_candidate_set", "gen_catalog", "gen_dataset", "gen_plan", "oracle_latency",
    "__version__",
]
