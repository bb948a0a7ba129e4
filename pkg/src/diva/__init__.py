"""Treatment-effect estimation from text via disentangled variational latents.

The package trains a small text encoder with three Gaussian latent branches
(treatment, confound, outcome), balances and separates them with MMD,
orthogonality, treatment and outcome losses plus a masked-token term, and
estimates causal effects by differencing two outcome heads. A semi-synthetic
benchmark with known ground-truth effects and the usual causal metrics
(sqrt PEHE, ATE error) round out the harness.
"""

from .baselines import TarnetConfig, TwoHeadRegressor, naive_ate, tarnet_fit_predict
from .corpus import (
    CorpusError,
    CovariateMarginals,
    Dataset,
    Document,
    PositivityReport,
    SyntheticCorpusSpec,
    assign_treatment,
    generate_synthetic_corpus,
    load_corpus,
    load_dataset,
    save_dataset,
    split_dataset,
    validate_positivity,
)
from .disentangle import (
    BatchLatents,
    ClassifierHeads,
    LossWeights,
    disentangle_total,
    linear_probe_accuracy,
    median_bandwidth,
    mmd_loss,
    orthogonality_loss,
    outcome_loss,
    treatment_loss,
)
from .encoder import (
    MLM_IGNORE,
    TextEncoder,
    Vocabulary,
    encode,
    encode_batch,
    mask_tokens,
    mlm_loss,
    pad_sequences,
    tokenize,
)
from .estimator import (
    EffectEstimate,
    QHeads,
    estimate_ate,
    estimate_ite,
    q_predict,
    read_effects_jsonl,
    refit_q_heads,
    write_effects_jsonl,
)
from .latent import (
    BRANCHES,
    LOG_VAR_RANGE,
    Decoder,
    InferenceNetwork,
    LatentSample,
    decode,
    elbo_loss,
    infer,
    kl_to_standard_normal,
)
from .metrics import (
    MetricReport,
    PriceSeries,
    ate_error,
    config_hash,
    load_prices,
    pehe_sqrt,
    stock_movement,
    stock_return,
    stock_volatility,
)
from .model import DivaModel
from .runner import RunResult, run_experiment
from .simulate import (
    PropensityTable,
    SimulatedOutcome,
    SimulationParams,
    estimate_propensity,
    simulate_dataset,
    simulate_movement,
    simulate_volatility,
    true_ate,
)
from .trainer import (
    Checkpoint,
    TrainConfig,
    desk_profile,
    evaluate_dev,
    lr_at,
    paper_profile,
    stratified_batches,
    total_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BRANCHES",
    "BatchLatents",
    "Checkpoint",
    "ClassifierHeads",
    "CorpusError",
    "CovariateMarginals",
    "Dataset",
    "Decoder",
    "DivaModel",
    "Document",
    "EffectEstimate",
    "InferenceNetwork",
    "LOG_VAR_RANGE",
    "LatentSample",
    "LossWeights",
    "MLM_IGNORE",
    "MetricReport",
    "PositivityReport",
    "PriceSeries",
    "PropensityTable",
    "QHeads",
    "RunResult",
    "SimulatedOutcome",
    "SimulationParams",
    "SyntheticCorpusSpec",
    "TarnetConfig",
    "TextEncoder",
    "TrainConfig",
    "TwoHeadRegressor",
    "Vocabulary",
    "assign_treatment",
    "ate_error",
    "config_hash",
    "decode",
    "desk_profile",
    "disentangle_total",
    "elbo_loss",
    "encode",
    "encode_batch",
    "estimate_ate",
    "estimate_ite",
    "estimate_propensity",
    "evaluate_dev",
    "generate_synthetic_corpus",
    "infer",
    "kl_to_standard_normal",
    "linear_probe_accuracy",
    "load_corpus",
    "load_dataset",
    "load_prices",
    "lr_at",
    "mask_tokens",
    "median_bandwidth",
    "mlm_loss",
    "mmd_loss",
    "naive_ate",
    "orthogonality_loss",
    "outcome_loss",
    "pad_sequences",
    "paper_profile",
    "pehe_sqrt",
    "q_predict",
    "read_effects_jsonl",
    "refit_q_heads",
    "run_experiment",
    "tokenize",
    "save_dataset",
    "simulate_dataset",
    "simulate_movement",
    "simulate_volatility",
    "split_dataset",
    "stock_movement",
    "stock_return",
    "stock_volatility",
    "stratified_batches",
    "tarnet_fit_predict",
    "total_loss",
    "train",
    "treatment_loss",
    "true_ate",
    "validate_positivity",
    "write_effects_jsonl",
]
