"""Battery degradation trajectory forecasting with a physics-informed expert mixture.

A single partial charge cycle plus its relaxation curve is turned into
physics features, routed through a noisy top-k mixture of degradation
experts into a latent trend, and decoded together with assumed future use
conditions into a capacity trajectory.
"""

from .amdp import GateOutput, RouterConfig, amdp_trend, gate_weights, importance_cv_loss
from .core import (
    BatterySeries,
    ConditionTriple,
    CycleRecord,
    Dataset,
    SplitSpec,
    dataset_summary,
    partition_dataset,
)
from .evalkit import (
    EvalReport,
    Metrics,
    MlpBaseline,
    classify_battery,
    compute_metrics,
    confidence_table,
    evaluate_model,
    poly_baseline,
    tsne_embed,
)
from .fornn import NetworkSpec, Trajectory, predict_trajectory, rollout
from .preprocess import (
    ChargeVector,
    FixedStart,
    NormStats,
    RandomSocStart,
    RelaxVector,
    Sample,
    apply_norm,
    build_charge_vector,
    build_samples,
    clean_cycles,
    fit_norm,
    sample_relaxation,
)
from .synthgen import SynthConfig, gen_battery, gen_fleet
from .trainer import (
    Checkpoint,
    ModelState,
    PreprocessConfig,
    TrainConfig,
    fit,
    load_checkpoint,
    save_checkpoint,
    total_loss,
)

__version__ = "0.1.0"
