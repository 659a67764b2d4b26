"""Future-operation recurrent decoder.

The latent trend from the expert mixture is concatenated with per-cycle
future conditions (charge C-rate, discharge C-rate, temperature, each
min-max scaled) into a 4-channel sequence that an LSTM decodes step by
step into the capacity trajectory. This module also owns the assembled
end-to-end network: parameter initialization, the batch forward pass used
in training, and single-sample inference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import amdp
from . import diffkernel as dk
from .amdp import GateOutput, RouterConfig
from .diffkernel import ParamSet, Tensor
from .errors import InvalidArgument, ModelContractError, ShapeError
from .preprocess import Sample

VARIANTS = ("standard", "history_mode", "ablate_amdp_linear", "ablate_fornn_plain_rnn")
N_CONDITION_CHANNELS = 3


@dataclass(frozen=True)
class NetworkSpec:
    """Shapes and wiring of one assembled model."""

    variant: str = "standard"
    feature_dim: int = 12
    n_charge: int = 50
    horizon: int = 50
    hidden: int = 64
    router: RouterConfig = RouterConfig()
    dropout: float = 0.05
    history_window: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgument(f"unknown variant {self.variant!r}")

    @property
    def lstm_input_dim(self) -> int:
        if self.variant == "ablate_fornn_plain_rnn":
            return 1  # trend only, condition-blind ablation
        return 1 + N_CONDITION_CHANNELS

    @property
    def expert_input_dim(self) -> int:
        return self.history_window if self.variant == "history_mode" else self.n_charge

    @property
    def router_input_dim(self) -> int:
        return self.history_window if self.variant == "history_mode" else self.feature_dim


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamSet:
    """Fresh parameters: glorot-uniform weights, zero biases, forget bias +1."""
    params = ParamSet()
    if spec.variant == "ablate_amdp_linear":
        params.add("linear.w", dk.glorot_uniform(rng, spec.expert_input_dim, spec.horizon))
        params.add("linear.b", np.zeros(spec.horizon))
    else:
        amdp.init_router_params(params, rng, spec.router_input_dim, spec.router.n_experts)
        amdp.init_expert_params(
            params, rng, spec.router.n_experts, spec.expert_input_dim, spec.hidden, spec.horizon
        )
    d_in, h = spec.lstm_input_dim, spec.hidden
    params.add("fornn.w_x", dk.glorot_uniform(rng, d_in, h, shape=(d_in, 4 * h)))
    params.add("fornn.w_h", dk.glorot_uniform(rng, h, h, shape=(h, 4 * h)))
    b = np.zeros(4 * h)
    b[h : 2 * h] = 1.0
    params.add("fornn.b", b)
    params.add("fornn.head_w", dk.glorot_uniform(rng, h, 1))
    params.add("fornn.head_b", np.zeros(1))
    return params


def build_fornn_input(trend: np.ndarray, conds_scaled: np.ndarray) -> np.ndarray:
    """Single-sample decoder input: timestep t carries [trend_t, conditions_t]."""
    trend = np.asarray(trend, dtype=np.float64)
    conds_scaled = np.asarray(conds_scaled, dtype=np.float64)
    if conds_scaled.ndim != 2 or conds_scaled.shape[1] != N_CONDITION_CHANNELS:
        raise ShapeError(f"conditions must be (L, 3), got {conds_scaled.shape}")
    if trend.shape[0] != conds_scaled.shape[0]:
        raise ShapeError(
            f"trend length {trend.shape[0]} != condition rows {conds_scaled.shape[0]}"
        )
    return np.concatenate([trend[:, None], conds_scaled], axis=1)


def rollout_steps(
    step_inputs: list[Tensor],
    params: ParamSet,
    hidden: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Decode a step-input list into a (batch, L) trajectory tensor."""
    batch = step_inputs[0].data.shape[0]
    h = dk.constant(np.zeros((batch, hidden)))
    c = dk.constant(np.zeros((batch, hidden)))
    w_x, w_h, b = params["fornn.w_x"], params["fornn.w_h"], params["fornn.b"]
    outputs = []
    for x in step_inputs:
        h, c = dk.lstm_step(x, h, c, w_x, w_h, b)
        head_in = h
        if training and dropout > 0.0:
            head_in = dk.dropout(h, dropout, rng, training=True)
        outputs.append(dk.affine(head_in, params["fornn.head_w"], params["fornn.head_b"]))
    return dk.concat_cols(outputs)


def rollout(x_seq: np.ndarray, params: ParamSet, hidden: int = 64) -> np.ndarray:
    """Single-sample decode of an (L, input_dim) sequence to L capacities."""
    x_seq = np.asarray(x_seq, dtype=np.float64)
    if x_seq.ndim != 2:
        raise ShapeError(f"expected (L, input_dim) sequence, got {x_seq.shape}")
    with dk.no_grad():
        steps = [dk.constant(x_seq[t : t + 1, :]) for t in range(x_seq.shape[0])]
        return rollout_steps(steps, params, hidden).data[0].copy()


def forward_batch(
    params: ParamSet,
    spec: NetworkSpec,
    q_scaled: np.ndarray,
    features: np.ndarray,
    conds_scaled: np.ndarray,
    history_scaled: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[Tensor, GateOutput | None]:
    """Full pipeline on a batch: trend, condition concat, LSTM decode.

    q_scaled is the charge vector in SOH units (mAh / nominal), features
    are already normalized, conditions already scaled per channel, and the
    history (history mode only) is in SOH units.
    """
    horizon = conds_scaled.shape[1]
    gate: GateOutput | None = None
    if spec.variant == "ablate_amdp_linear":
        trend = dk.affine(dk.constant(q_scaled), params["linear.w"], params["linear.b"])
    elif spec.variant == "history_mode":
        if history_scaled is None:
            raise ModelContractError("history-mode model needs capacity history input")
        logits, psi = amdp.history_mode_logits(
            dk.constant(history_scaled), params, spec.router, spec.history_window,
            rng=rng, training=training,
        )
        gate = amdp.gate_weights(logits, spec.router)
        gate.noise_draw = psi
        outs = [
            amdp.expert_forward(dk.constant(history_scaled), params, j)
            for j in range(spec.router.n_experts)
        ]
        trend = amdp.combine_experts(outs, gate.weights)
    else:
        trend, gate = amdp.amdp_trend(
            dk.constant(q_scaled), dk.constant(features), params, spec.router,
            rng=rng, training=training,
        )

    trend = _fit_trend_to_horizon(trend, horizon)
    steps = []
    for t in range(horizon):
        cols = [dk.slice_cols(trend, t, t + 1)]
        if spec.variant != "ablate_fornn_plain_rnn":
            cols.append(dk.constant(conds_scaled[:, t, :]))
        steps.append(dk.concat_cols(cols) if len(cols) > 1 else cols[0])
    pred = rollout_steps(steps, params, spec.hidden, spec.dropout, rng, training)
    return pred, gate


def _fit_trend_to_horizon(trend: Tensor, horizon: int) -> Tensor:
    """Truncate, or pad by repeating the final value, to the requested length."""
    width = trend.data.shape[1]
    if width == horizon:
        return trend
    if width > horizon:
        return dk.slice_cols(trend, 0, horizon)
    tail = dk.slice_cols(trend, width - 1, width)
    return dk.concat_cols([trend] + [tail] * (horizon - width))


@dataclass
class Trajectory:
    """Predicted capacity sequence, stored in SOH units with mAh on demand."""

    values_soh: np.ndarray
    nominal_capacity_mah: float
    inference_ms: float = 0.0

    @property
    def values_mah(self) -> np.ndarray:
        return self.values_soh * self.nominal_capacity_mah

    def __len__(self) -> int:
        return len(self.values_soh)


def predict_trajectory(sample: Sample, model, horizon: int | None = None) -> Trajectory:
    """Deterministic single-sample inference through the frozen model.

    ``model`` is a trained ModelState. Raw sample features are normalized
    with the model's stored stats; conditions are scaled with its stored
    condition scaler. The call is wall-clock timed for latency reporting.
    """
    spec: NetworkSpec = model.spec
    if sample.features.shape[0] != spec.feature_dim and spec.variant != "history_mode":
        raise ModelContractError(
            f"sample has {sample.features.shape[0]} features, model expects {spec.feature_dim}"
        )
    if sample.q.model_values().shape[0] != spec.n_charge and spec.variant != "history_mode":
        raise ModelContractError(
            f"charge vector has {sample.q.model_values().shape[0]} segments, "
            f"model expects {spec.n_charge}"
        )
    horizon = horizon or spec.horizon
    if sample.conditions.shape[0] < horizon:
        raise ModelContractError(
            f"sample carries {sample.conditions.shape[0]} future conditions, need {horizon}"
        )

    start = time.perf_counter()
    f = model.norm.transform(sample.features)[None, :]
    q = (sample.q.model_values() / sample.nominal_capacity_mah)[None, :]
    conds = model.cond_scaler.transform(sample.conditions[:horizon])[None, :, :]
    hist = None
    if spec.variant == "history_mode":
        if sample.capacity_history_mah is None:
            raise ModelContractError("history-mode model needs samples with capacity history")
        if sample.capacity_history_mah.shape[0] != spec.history_window:
            raise ModelContractError(
                f"history length {sample.capacity_history_mah.shape[0]} != "
                f"window {spec.history_window}"
            )
        hist = (sample.capacity_history_mah / sample.nominal_capacity_mah)[None, :]
    with dk.no_grad():
        pred, _ = forward_batch(model.params, spec, q, f, conds, hist, training=False)
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    return Trajectory(
        values_soh=pred.data[0].copy(),
        nominal_capacity_mah=sample.nominal_capacity_mah,
        inference_ms=elapsed_ms,
    )
