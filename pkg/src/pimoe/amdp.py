"""Adaptive multi-degradation prediction: noisy top-k routing over experts.

The degradation router maps a physics-feature vector to expert logits,
optionally perturbed during training by Gaussian noise scaled through a
softplus of a second learned projection. The k largest logits survive, a
softmax over the survivors yields sparse weights, and the latent trend is
the weighted sum of the selected experts' outputs. A history-capacity
variant drives the same machinery from past maximum-capacity points
instead of within-cycle features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .diffkernel import ParamSet, Tensor
from .errors import InsufficientData, InvalidArgument, ShapeError


@dataclass(frozen=True)
class RouterConfig:
    """Gating hyperparameters; noise only ever applies in training mode."""

    n_experts: int = 5
    top_k: int = 2
    noise_in_training: bool = True
    double_softmax_literal: bool = False

    def __post_init__(self):
        if self.n_experts < 1:
            raise InvalidArgument("need at least one expert")
        if not 1 <= self.top_k <= self.n_experts:
            raise InvalidArgument(
                f"top_k must be in [1, {self.n_experts}], got {self.top_k}"
            )


@dataclass
class GateOutput:
    """Routing result for a batch: dense logits, sparse weights, selections."""

    logits: np.ndarray  # (B, E)
    noise_draw: np.ndarray | None  # (B, E) standard-normal draw, None in eval
    weights: Tensor  # (B, E), exactly k nonzero per row
    selected: np.ndarray  # (B, k) expert indices, largest logit first

    @property
    def weights_np(self) -> np.ndarray:
        return self.weights.data


def init_router_params(
    params: ParamSet, rng: np.random.Generator, d_in: int, n_experts: int, prefix: str = "router"
) -> None:
    params.add(prefix + ".w_g", dk.glorot_uniform(rng, d_in, n_experts))
    params.add(prefix + ".w_noise", dk.glorot_uniform(rng, d_in, n_experts))


def init_expert_params(
    params: ParamSet,
    rng: np.random.Generator,
    n_experts: int,
    d_in: int,
    hidden: int,
    d_out: int,
) -> None:
    """Experts share one architecture: affine -> ReLU -> affine."""
    for j in range(n_experts):
        params.add(f"expert{j}.w1", dk.glorot_uniform(rng, d_in, hidden))
        params.add(f"expert{j}.b1", np.zeros(hidden))
        params.add(f"expert{j}.w2", dk.glorot_uniform(rng, hidden, d_out))
        params.add(f"expert{j}.b2", np.zeros(d_out))


def router_logits(
    f: Tensor | np.ndarray,
    params: ParamSet,
    cfg: RouterConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
    prefix: str = "router",
) -> tuple[Tensor, np.ndarray | None]:
    """Raw expert logits, with the training-time noise term when enabled."""
    f = dk.constant(f)
    w_g = params[prefix + ".w_g"]
    if f.data.ndim != 2 or f.data.shape[1] != w_g.data.shape[0]:
        raise ShapeError(
            f"feature batch {f.data.shape} incompatible with router input {w_g.data.shape[0]}"
        )
    clean = dk.matmul(f, w_g)
    if training and cfg.noise_in_training:
        if rng is None:
            raise InvalidArgument("training-mode routing with noise needs an rng")
        psi = rng.standard_normal(clean.data.shape)
        spread = dk.softplus(dk.matmul(f, params[prefix + ".w_noise"]))
        return dk.add(clean, dk.mul(dk.constant(psi), spread)), psi
    return clean, None


def gate_weights(logits: Tensor | np.ndarray, cfg: RouterConfig) -> GateOutput:
    """Sparse gate weights over the k largest logits.

    Default: one softmax over the survivors. The literal double-softmax
    mode applies softmax twice over the same survivors, which flattens the
    weights but preserves sparsity. Ties select the lowest expert index.
    """
    logits = dk.constant(logits) if not isinstance(logits, Tensor) else logits
    h = logits.data
    if h.ndim != 2:
        raise ShapeError(f"logits must be (batch, experts), got {h.shape}")
    e = h.shape[1]
    if e != cfg.n_experts:
        raise ShapeError(f"logit width {e} != configured experts {cfg.n_experts}")
    # stable argsort of -h keeps the lowest index first among equal logits
    selected = np.argsort(-h, axis=1, kind="stable")[:, : cfg.top_k]
    picked = dk.gather_cols(logits, selected)
    w = dk.softmax(picked, axis=1)
    if cfg.double_softmax_literal:
        w = dk.softmax(w, axis=1)
    weights = dk.scatter_cols(w, selected, e)
    return GateOutput(logits=h, noise_draw=None, weights=weights, selected=selected)


def expert_forward(
    q: Tensor | np.ndarray,
    params: ParamSet,
    j: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    q = dk.constant(q)
    hidden = dk.relu(dk.affine(q, params[f"expert{j}.w1"], params[f"expert{j}.b1"]))
    if training and dropout > 0.0:
        hidden = dk.dropout(hidden, dropout, rng, training=True)
    return dk.affine(hidden, params[f"expert{j}.w2"], params[f"expert{j}.b2"])


def combine_experts(expert_outputs: list[Tensor], weights: Tensor) -> Tensor:
    """Weighted superposition: sum_j w_j * out_j with per-sample weights."""
    if not expert_outputs:
        raise InvalidArgument("no expert outputs to combine")
    total = None
    for j, out in enumerate(expert_outputs):
        term = dk.mul(dk.slice_cols(weights, j, j + 1), out)
        total = term if total is None else dk.add(total, term)
    return total


def amdp_trend(
    q: Tensor | np.ndarray,
    f: Tensor | np.ndarray,
    params: ParamSet,
    cfg: RouterConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
    dropout: float = 0.0,
) -> tuple[Tensor, GateOutput]:
    """Latent degradation trend for a batch: route, run experts, fuse.

    Unselected experts carry exactly zero weight, so evaluating all of them
    keeps gradients identical to evaluating only the selected ones.
    """
    logits, psi = router_logits(f, params, cfg, rng=rng, training=training)
    gate = gate_weights(logits, cfg)
    gate.noise_draw = psi
    outs = [
        expert_forward(q, params, j, dropout=dropout, rng=rng, training=training)
        for j in range(cfg.n_experts)
    ]
    return combine_experts(outs, gate.weights), gate


def history_mode_logits(
    q_hist: Tensor | np.ndarray,
    params: ParamSet,
    cfg: RouterConfig,
    window: int,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[Tensor, np.ndarray | None]:
    """Router logits driven by past maximum-capacity points."""
    arr = q_hist.data if isinstance(q_hist, Tensor) else np.asarray(q_hist)
    if arr.ndim != 2 or arr.shape[1] < window:
        raise InsufficientData(
            f"history batch {arr.shape} shorter than configured window {window}"
        )
    return router_logits(q_hist, params, cfg, rng=rng, training=training)


def importance_cv_loss(weights: Tensor | np.ndarray, eps: float = 10.0) -> Tensor:
    """Squared coefficient of variation of batch-summed expert importances.

    importance_j = sum over the batch of gate weight j; the loss is
    Var(importance) / (Mean(importance)^2 + eps) with population variance.
    """
    w = dk.constant(weights) if not isinstance(weights, Tensor) else weights
    if w.data.ndim != 2:
        raise ShapeError(f"expected (batch, experts) weights, got {w.data.shape}")
    a = dk.ssum(w, axis=0)
    mean_a = dk.smean(a)
    var_a = dk.smean(dk.square(dk.sub(a, mean_a)))
    return dk.div(var_a, dk.add(dk.square(mean_a), eps))
