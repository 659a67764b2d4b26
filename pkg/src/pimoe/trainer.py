"""Joint training of the expert mixture and the recurrent decoder.

Targets are trained in SOH units (capacity / nominal) so one loss scale
works across chemistries; conversions back to mAh happen at reporting
boundaries. The composite loss is alpha * trajectory error + beta * the
router's coefficient-of-variation penalty. Checkpoints are a single file:
a JSON manifest plus one little-endian float64 blob holding every array,
guarded by a SHA-256 checksum, so round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import amdp
from . import diffkernel as dk
from . import fornn
from .amdp import GateOutput, RouterConfig
from .core import Dataset, SplitSpec
from .diffkernel import AdamState, ParamSet, Tensor
from .errors import (
    ChecksumError,
    IncompatibleCheckpoint,
    InvalidArgument,
    InvalidDataset,
    ModelContractError,
    TrainingDiverged,
)
from .fornn import NetworkSpec
from .preprocess import (
    FixedStart,
    NormStats,
    RandomSocStart,
    Sample,
    build_samples,
    clean_cycles,
    fit_norm,
)

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"PIMOECKP"


@dataclass(frozen=True)
class TrainConfig:
    horizon: int = 50
    n_experts: int = 5
    top_k: int = 2
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    alpha: float = 0.75
    beta: float = 0.25
    cv_eps: float = 10.0
    epochs: int = 200
    patience: int = 20
    seed: int = 0
    dropout: float = 0.05
    feature_mode: str = "full12"
    variant: str = "standard"
    hidden_dim: int = 64
    n_charge_segments: int = 50
    history_window: int = 10
    noise_in_training: bool = True
    double_softmax_literal: bool = False

    def __post_init__(self):
        if self.alpha + self.beta <= 0:
            raise InvalidArgument("alpha + beta must be positive")
        for name in ("horizon", "n_experts", "top_k", "batch_size", "epochs", "hidden_dim"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if self.feature_mode not in ("full12", "charge_only6"):
            raise InvalidArgument(f"unknown feature mode {self.feature_mode!r}")
        if self.variant not in fornn.VARIANTS:
            raise InvalidArgument(f"unknown variant {self.variant!r}")
        if not 0 <= self.weight_decay <= 1e-4:
            raise InvalidArgument("weight_decay must lie in [0, 1e-4]")

    @property
    def feature_dim(self) -> int:
        return 12 if self.feature_mode == "full12" else 6


def network_spec(cfg: TrainConfig) -> NetworkSpec:
    return NetworkSpec(
        variant=cfg.variant,
        feature_dim=cfg.feature_dim,
        n_charge=cfg.n_charge_segments,
        horizon=cfg.horizon,
        hidden=cfg.hidden_dim,
        router=RouterConfig(
            n_experts=cfg.n_experts,
            top_k=cfg.top_k,
            noise_in_training=cfg.noise_in_training,
            double_softmax_literal=cfg.double_softmax_literal,
        ),
        dropout=cfg.dropout,
        history_window=cfg.history_window,
    )


@dataclass(frozen=True)
class PreprocessConfig:
    """How raw cycles become samples; shared by training and evaluation."""

    v_start: FixedStart | RandomSocStart = FixedStart(3.5)
    relax_window_min: float = 30.0
    relax_points: int = 30
    current_tol: float = 0.05


def prep_to_dict(prep: PreprocessConfig) -> dict:
    if isinstance(prep.v_start, FixedStart):
        v = {"policy": "fixed", "voltage_v": prep.v_start.voltage_v}
    else:
        v = {
            "policy": "random_soc",
            "seed": prep.v_start.seed,
            "soc_range": list(prep.v_start.soc_range),
        }
    return {
        "v_start": v,
        "relax_window_min": prep.relax_window_min,
        "relax_points": prep.relax_points,
        "current_tol": prep.current_tol,
    }


def prep_from_dict(doc: dict) -> PreprocessConfig:
    v = doc["v_start"]
    if v["policy"] == "fixed":
        policy = FixedStart(v["voltage_v"])
    else:
        policy = RandomSocStart(seed=v["seed"], soc_range=tuple(v["soc_range"]))
    return PreprocessConfig(
        v_start=policy,
        relax_window_min=doc["relax_window_min"],
        relax_points=doc["relax_points"],
        current_tol=doc["current_tol"],
    )


@dataclass
class ModelState:
    """Everything a frozen model needs to predict: params, stats, config."""

    config: TrainConfig
    spec: NetworkSpec
    params: ParamSet
    norm: NormStats
    cond_scaler: NormStats
    version: int = CHECKPOINT_VERSION
    training_history: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# sample preparation
# ---------------------------------------------------------------------------


def prepare_samples(
    ds: Dataset, ids, cfg: TrainConfig, prep: PreprocessConfig
) -> dict[str, list[Sample]]:
    """Clean each battery and build its sliding-window samples."""
    out: dict[str, list[Sample]] = {}
    hist = cfg.history_window if cfg.variant == "history_mode" else 0
    for bid in ids:
        b = clean_cycles(ds.get(bid), current_tol=prep.current_tol).series
        out[bid] = build_samples(
            b,
            horizon=cfg.horizon,
            v_start_policy=prep.v_start,
            n_segments=cfg.n_charge_segments,
            relax_window_min=prep.relax_window_min,
            relax_points=prep.relax_points,
            feature_mode=cfg.feature_mode,
            history_window=hist,
        )
    return out


@dataclass
class _Batch:
    q: np.ndarray  # (n, n_charge) in SOH units
    f: np.ndarray  # (n, d) normalized features
    c: np.ndarray  # (n, L, 3) scaled conditions
    y: np.ndarray  # (n, L) SOH targets
    hist: np.ndarray | None  # (n, window) SOH history

    def __len__(self) -> int:
        return self.q.shape[0]

    def take(self, idx: np.ndarray) -> "_Batch":
        return _Batch(
            q=self.q[idx],
            f=self.f[idx],
            c=self.c[idx],
            y=self.y[idx],
            hist=self.hist[idx] if self.hist is not None else None,
        )


def stack_samples(
    samples: list[Sample], norm: NormStats, cond_scaler: NormStats, history_mode: bool
) -> _Batch:
    nominal = np.array([s.nominal_capacity_mah for s in samples])[:, None]
    q = np.stack([s.q.model_values() for s in samples]) / nominal
    f = norm.transform(np.stack([s.features for s in samples]))
    c = cond_scaler.transform(np.stack([s.conditions for s in samples]))
    y = np.stack([s.target_mah for s in samples]) / nominal
    hist = None
    if history_mode:
        hist = np.stack([s.capacity_history_mah for s in samples]) / nominal
    return _Batch(q=q, f=f, c=c, y=y, hist=hist)


def fit_condition_scaler(samples: list[Sample]) -> NormStats:
    rows = np.concatenate([s.conditions for s in samples], axis=0)
    return fit_norm(rows)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def total_loss(
    pred: Tensor,
    target: np.ndarray,
    gate: GateOutput | None,
    alpha: float,
    beta: float,
    eps: float,
) -> tuple[Tensor, float, float]:
    """alpha * mean per-sample squared trajectory error + beta * CV penalty.

    The trajectory term averages, over the batch, the summed squared error
    along each predicted trajectory. Returns (loss node, trajectory value,
    cv value) with the cv value 0.0 when no gate is present.
    """
    err = dk.sub(pred, dk.constant(target))
    traj = dk.smean(dk.ssum(dk.square(err), axis=1))
    loss = dk.mul(traj, alpha)
    cv_value = 0.0
    if gate is not None:
        cv = amdp.importance_cv_loss(gate.weights, eps)
        cv_value = cv.item()
        if beta != 0.0:
            loss = dk.add(loss, dk.mul(cv, beta))
    return loss, traj.item(), cv_value


def _grad_norm(params: ParamSet) -> float:
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------


def train_epoch(
    params: ParamSet,
    spec: NetworkSpec,
    adam: AdamState,
    data: _Batch,
    cfg: TrainConfig,
    rng_shuffle: np.random.Generator,
    rng_noise: np.random.Generator,
) -> dict:
    """One pass of shuffled mini-batches: forward, backward, Adam."""
    n = len(data)
    order = rng_shuffle.permutation(n)
    loss_sum = traj_sum = cv_sum = 0.0
    norms: list[float] = []
    for start in range(0, n, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        batch = data.take(idx)
        pred, gate = fornn.forward_batch(
            params, spec, batch.q, batch.f, batch.c, batch.hist,
            rng=rng_noise, training=True,
        )
        loss, traj_val, cv_val = total_loss(
            pred, batch.y, gate, cfg.alpha, cfg.beta, cfg.cv_eps
        )
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss {value} (trajectory {traj_val}, cv {cv_val}) "
                f"at step {adam.step + 1}"
            )
        dk.backward(loss, params)
        norms.append(_grad_norm(params))
        dk.adam_step(params, adam)
        w = len(idx)
        loss_sum += value * w
        traj_sum += traj_val * w
        cv_sum += cv_val * w
    return {
        "train_loss": loss_sum / n,
        "train_traj": traj_sum / n,
        "train_cv": cv_sum / n,
        "grad_norm_mean": float(np.mean(norms)),
        "grad_norm_max": float(np.max(norms)),
    }


def eval_traj_loss(params: ParamSet, spec: NetworkSpec, data: _Batch, batch_size: int) -> float:
    """Mean per-sample squared trajectory error in eval mode."""
    n = len(data)
    total = 0.0
    with dk.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            batch = data.take(idx)
            pred, _ = fornn.forward_batch(
                params, spec, batch.q, batch.f, batch.c, batch.hist, training=False
            )
            err = pred.data - batch.y
            total += float(np.sum(err * err))
    return total / n


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def fit(
    ds: Dataset,
    split: SplitSpec,
    cfg: TrainConfig,
    prep: PreprocessConfig | None = None,
) -> ModelState:
    """Train with validation-based selection and early stopping.

    Normalization and condition scaling are fitted on the training split
    only. With an empty validation split, selection falls back to the
    epoch-mean training loss. Deterministic given (config, seed).
    """
    prep = prep or PreprocessConfig()
    if not split.train_ids:
        raise InvalidDataset("training split is empty")
    known = set(ds.battery_ids())
    missing = [i for i in (*split.train_ids, *split.val_ids, *split.test_ids) if i not in known]
    if missing:
        raise InvalidDataset(f"split references unknown batteries: {missing}")

    spec = network_spec(cfg)
    history_mode = cfg.variant == "history_mode"

    by_battery = prepare_samples(ds, (*split.train_ids, *split.val_ids), cfg, prep)
    train_samples = [s for bid in split.train_ids for s in by_battery[bid]]
    val_samples = [s for bid in split.val_ids for s in by_battery[bid]]
    if not train_samples:
        raise InvalidDataset("no training samples after cleaning and windowing")

    norm = fit_norm(np.stack([s.features for s in train_samples]))
    cond_scaler = fit_condition_scaler(train_samples)
    train_data = stack_samples(train_samples, norm, cond_scaler, history_mode)
    val_data = (
        stack_samples(val_samples, norm, cond_scaler, history_mode) if val_samples else None
    )

    rng_init = np.random.default_rng([cfg.seed, 0])
    rng_noise = np.random.default_rng([cfg.seed, 1])
    rng_shuffle = np.random.default_rng([cfg.seed, 2])
    params = fornn.init_params(spec, rng_init)
    adam = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    history: list[dict] = []
    best_metric = np.inf
    best_params = params.copy()
    best_epoch = -1
    stale = 0
    for epoch in range(cfg.epochs):
        stats = train_epoch(params, spec, adam, train_data, cfg, rng_shuffle, rng_noise)
        if val_data is not None:
            metric = eval_traj_loss(params, spec, val_data, cfg.batch_size)
            stats["val_traj"] = metric
        else:
            metric = stats["train_loss"]
        stats["epoch"] = epoch
        history.append(stats)
        if metric < best_metric:
            best_metric = metric
            best_params = params.copy()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break

    return ModelState(
        config=cfg,
        spec=spec,
        params=best_params,
        norm=norm,
        cond_scaler=cond_scaler,
        training_history=history + [{"best_epoch": best_epoch, "best_metric": best_metric}],
    )


# ---------------------------------------------------------------------------
# frozen-model exports
# ---------------------------------------------------------------------------


def gate_matrix(model: ModelState, samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gate weights (n, E) and selected expert indices (n, k)."""
    if model.spec.variant == "ablate_amdp_linear":
        raise ModelContractError("linear-trend ablation has no degradation router")
    data = stack_samples(
        samples, model.norm, model.cond_scaler, model.spec.variant == "history_mode"
    )
    with dk.no_grad():
        if model.spec.variant == "history_mode":
            logits, _ = amdp.history_mode_logits(
                dk.constant(data.hist), model.params, model.spec.router,
                model.spec.history_window,
            )
        else:
            logits, _ = amdp.router_logits(
                dk.constant(data.f), model.params, model.spec.router
            )
        gate = amdp.gate_weights(logits, model.spec.router)
    return gate.weights_np.copy(), gate.selected.copy()


def trend_matrix(model: ModelState, samples: list[Sample]) -> np.ndarray:
    """Raw latent trends (n, L) from the frozen trend stage."""
    data = stack_samples(
        samples, model.norm, model.cond_scaler, model.spec.variant == "history_mode"
    )
    spec = model.spec
    with dk.no_grad():
        if spec.variant == "ablate_amdp_linear":
            trend = dk.affine(dk.constant(data.q), model.params["linear.w"], model.params["linear.b"])
        elif spec.variant == "history_mode":
            logits, _ = amdp.history_mode_logits(
                dk.constant(data.hist), model.params, spec.router, spec.history_window
            )
            gate = amdp.gate_weights(logits, spec.router)
            outs = [
                amdp.expert_forward(dk.constant(data.hist), model.params, j)
                for j in range(spec.router.n_experts)
            ]
            trend = amdp.combine_experts(outs, gate.weights)
        else:
            trend, _ = amdp.amdp_trend(
                dk.constant(data.q), dk.constant(data.f), model.params, spec.router
            )
    return trend.data.copy()


def export_trend_embeddings(model: ModelState, samples: list[Sample]) -> np.ndarray:
    """Trend matrix min-max normalized per position across samples, in [0, 1]."""
    raw = trend_matrix(model, samples)
    return fit_norm(raw).transform(raw)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: ModelState
    adam: AdamState | None = None
    rng_state: dict | None = None
    prep: dict | None = None


def _collect_arrays(model: ModelState, adam: AdamState | None) -> ParamSet:
    blob_set = ParamSet()
    for name, t in model.params.items():
        blob_set.add("param." + name, t.data)
    blob_set.add("norm.mins", model.norm.mins)
    blob_set.add("norm.maxs", model.norm.maxs)
    blob_set.add("cond.mins", model.cond_scaler.mins)
    blob_set.add("cond.maxs", model.cond_scaler.maxs)
    if adam is not None:
        for name, arr in sorted(adam.m.items()):
            blob_set.add("adam.m." + name, arr)
        for name, arr in sorted(adam.v.items()):
            blob_set.add("adam.v." + name, arr)
    return blob_set


def save_checkpoint(
    path,
    model: ModelState,
    adam: AdamState | None = None,
    rng_state: dict | None = None,
    prep: PreprocessConfig | None = None,
) -> None:
    blob_set = _collect_arrays(model, adam)
    entries, blob = dk.params_to_blob(blob_set)
    manifest = {
        "version": model.version,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "entries": entries,
        "config": asdict(model.config),
        "training_history": model.training_history,
        "adam": None
        if adam is None
        else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "weight_decay": adam.weight_decay, "step": adam.step,
        },
        "rng_state": rng_state,
        "prep": None if prep is None else prep_to_dict(prep),
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ChecksumError("not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    if manifest["version"] != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(
            f"checkpoint version {manifest['version']} != supported {CHECKPOINT_VERSION}"
        )
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ChecksumError("checkpoint blob is truncated or corrupt")

    blob_set = dk.params_from_blob(manifest["entries"], blob)
    cfg = TrainConfig(**manifest["config"])
    params = ParamSet()
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    arrays: dict[str, np.ndarray] = {}
    for name, t in blob_set.items():
        if name.startswith("param."):
            params.add(name[len("param.") :], t.data)
        elif name.startswith("adam.m."):
            adam_m[name[len("adam.m.") :]] = t.data
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v.") :]] = t.data
        else:
            arrays[name] = t.data

    model = ModelState(
        config=cfg,
        spec=network_spec(cfg),
        params=params,
        norm=NormStats(mins=arrays["norm.mins"], maxs=arrays["norm.maxs"]),
        cond_scaler=NormStats(mins=arrays["cond.mins"], maxs=arrays["cond.maxs"]),
        version=manifest["version"],
        training_history=manifest["training_history"],
    )
    adam = None
    if manifest["adam"] is not None:
        meta = manifest["adam"]
        adam = AdamState(
            lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
            weight_decay=meta["weight_decay"], step=meta["step"], m=adam_m, v=adam_v,
        )
    return Checkpoint(
        model=model,
        adam=adam,
        rng_state=manifest["rng_state"],
        prep=manifest.get("prep"),
    )
