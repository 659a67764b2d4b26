"""Metrics, reference baselines, expert-weight classification, and t-SNE.

Reported metrics use capacity as a percentage of nominal (SOH * 100), so
RMSE and MAE read as percentage points; MAPE and R-squared are scale-free
either way.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import diffkernel as dk
from . import fornn
from . import trainer as trainer_mod
from .core import Dataset, battery_condition_tag
from .errors import (
    CalibrationAmbiguous,
    InsufficientData,
    InvalidArgument,
    ShapeError,
    Underdetermined,
)
from .preprocess import Sample

LABELS = ("Excellent", "Qualified", "Scrap")
BUCKET_EXPECTED_LABEL = {95: "Excellent", 85: None, 75: "Scrap"}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mape_percent: float
    r2: float
    mae: float


def compute_metrics(pred: np.ndarray, truth: np.ndarray) -> Metrics:
    """RMSE, MAPE (%), R-squared, and MAE between two equal-length vectors.

    R-squared is NaN when the truth is constant (zero variance denominator).
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1 or pred.size < 1:
        raise ShapeError(f"metric inputs must be equal-length vectors, got {pred.shape} vs {truth.shape}")
    if np.any(truth <= 0):
        raise InvalidArgument("MAPE needs strictly positive truth values")
    err = pred - truth
    rmse = float(np.sqrt(np.mean(err * err)))
    mape = float(np.mean(np.abs(err) / truth) * 100.0)
    mae = float(np.mean(np.abs(err)))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = math.nan
    else:
        r2 = 1.0 - float(np.sum(err * err)) / ss_tot
    return Metrics(rmse=rmse, mape_percent=mape, r2=r2, mae=mae)


# ---------------------------------------------------------------------------
# polynomial baseline
# ---------------------------------------------------------------------------


def _poly_basis(x: np.ndarray, window: int, degree: int) -> np.ndarray:
    """Vandermonde on x centered at the window midpoint and scaled to [-1, 1]."""
    half = (window - 1) / 2.0
    z = (x - half) / max(half, 1.0)
    return np.vander(z, degree + 1, increasing=True)


def poly_coefficients(history: np.ndarray, degree: int = 3) -> np.ndarray:
    """Least-squares coefficients on the centered/scaled monomial basis."""
    history = np.asarray(history, dtype=np.float64)
    window = history.size
    if window < degree + 1:
        raise Underdetermined(f"window {window} cannot fit degree {degree}")
    basis = _poly_basis(np.arange(window, dtype=np.float64), window, degree)
    beta, *_ = np.linalg.lstsq(basis, history, rcond=None)
    return beta


def poly_baseline(
    history: np.ndarray, degree: int = 3, window: int = 50, steps: int = 50
) -> np.ndarray:
    """Fit a degree-d polynomial to the capacity window, extrapolate s cycles."""
    history = np.asarray(history, dtype=np.float64)
    if history.size != window:
        raise InvalidArgument(f"history length {history.size} != window {window}")
    beta = poly_coefficients(history, degree)
    future = np.arange(window, window + steps, dtype=np.float64)
    return _poly_basis(future, window, degree) @ beta


# ---------------------------------------------------------------------------
# MLP baseline
# ---------------------------------------------------------------------------


def build_history_pairs(
    seq: np.ndarray, window: int = 10, steps: int = 50, stride: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Window/target pairs: X_k = seq[k*d : k*d+w], Y_k = the next s values.

    k runs from 0 to floor((T - w - s) / stride), so a length-T sequence
    yields floor((T - w - s) / stride) + 1 pairs (none when T < w + s).
    """
    seq = np.asarray(seq, dtype=np.float64)
    t = seq.size
    if stride < 1:
        raise InvalidArgument("stride must be >= 1")
    last = (t - window - steps) // stride
    if last < 0:
        return np.empty((0, window)), np.empty((0, steps))
    xs, ys = [], []
    for k in range(last + 1):
        start = k * stride
        xs.append(seq[start : start + window])
        ys.append(seq[start + window : start + window + steps])
    return np.stack(xs), np.stack(ys)


class MlpBaseline:
    """Three-layer ReLU network mapping a capacity window to the next s cycles."""

    def __init__(
        self,
        window: int = 10,
        steps: int = 50,
        hidden: tuple[int, int] = (128, 64),
        lr: float = 1e-3,
        epochs: int = 200,
        batch_size: int = 32,
        seed: int = 0,
    ):
        self.window = window
        self.steps = steps
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        rng = np.random.default_rng([seed, 0])
        h1, h2 = hidden
        self.params = dk.ParamSet()
        self.params.add("w1", dk.glorot_uniform(rng, window, h1))
        self.params.add("b1", np.zeros(h1))
        self.params.add("w2", dk.glorot_uniform(rng, h1, h2))
        self.params.add("b2", np.zeros(h2))
        self.params.add("w3", dk.glorot_uniform(rng, h2, steps))
        self.params.add("b3", np.zeros(steps))

    def _forward(self, x) -> dk.Tensor:
        h1 = dk.relu(dk.affine(dk.constant(x), self.params["w1"], self.params["b1"]))
        h2 = dk.relu(dk.affine(h1, self.params["w2"], self.params["b2"]))
        return dk.affine(h2, self.params["w3"], self.params["b3"])

    def fit(self, sequences: list[np.ndarray]) -> "MlpBaseline":
        xs, ys = [], []
        for seq in sequences:
            x, y = build_history_pairs(seq, self.window, self.steps)
            if len(x):
                xs.append(x)
                ys.append(y)
        if not xs:
            raise InsufficientData(
                f"no sequence is long enough for window {self.window} + steps {self.steps}"
            )
        x_all, y_all = np.concatenate(xs), np.concatenate(ys)
        adam = dk.AdamState(lr=self.lr)
        rng = np.random.default_rng([self.seed, 1])
        n = len(x_all)
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                pred = self._forward(x_all[idx])
                err = dk.sub(pred, dk.constant(y_all[idx]))
                loss = dk.smean(dk.ssum(dk.square(err), axis=1))
                dk.backward(loss, self.params)
                dk.adam_step(self.params, adam)
        return self

    def predict(self, history: np.ndarray) -> np.ndarray:
        history = np.asarray(history, dtype=np.float64)
        if history.size != self.window:
            raise InvalidArgument(f"history length {history.size} != window {self.window}")
        with dk.no_grad():
            return self._forward(history[None, :]).data[0].copy()


# ---------------------------------------------------------------------------
# classification from gate weights
# ---------------------------------------------------------------------------

STAGES = ("early", "mid", "late")


def stage_label_for_soh(soh: float, early_floor: float = 0.9, late_ceiling: float = 0.8) -> str:
    if soh >= early_floor:
        return "early"
    if soh <= late_ceiling:
        return "late"
    return "mid"


@dataclass
class StageMap:
    """Calibrated stage -> dominant expert mapping, persisted with a model."""

    stage_to_expert: dict[str, int]
    mean_weights: np.ndarray  # (3, E) per-stage mean gate weight
    ambiguous: bool = False

    @property
    def early_expert(self) -> int:
        return self.stage_to_expert["early"]

    @property
    def late_expert(self) -> int:
        return self.stage_to_expert["late"]


def calibrate_from_weights(
    weights: np.ndarray, stage_labels, strict: bool = True
) -> StageMap:
    """Map each stage to the expert with the highest mean gate weight."""
    weights = np.asarray(weights, dtype=np.float64)
    labels = np.asarray(stage_labels)
    if weights.ndim != 2 or weights.shape[0] != labels.shape[0]:
        raise ShapeError("weights must be (n, E) aligned with n stage labels")
    means = np.zeros((len(STAGES), weights.shape[1]))
    mapping: dict[str, int] = {}
    for i, stage in enumerate(STAGES):
        mask = labels == stage
        if not mask.any():
            raise InsufficientData(f"no calibration samples labeled {stage!r}")
        means[i] = weights[mask].mean(axis=0)
        mapping[stage] = int(np.argmax(means[i]))
    ambiguous = len(set(mapping.values())) < len(STAGES)
    if ambiguous and strict:
        raise CalibrationAmbiguous(f"stage map collides: {mapping}")
    return StageMap(stage_to_expert=mapping, mean_weights=means, ambiguous=ambiguous)


def calibrate_expert_stage_map(
    model, samples: list[Sample], stage_labels, strict: bool = True
) -> StageMap:
    weights, _ = trainer_mod.gate_matrix(model, samples)
    return calibrate_from_weights(weights, stage_labels, strict=strict)


@dataclass(frozen=True)
class ClassLabel:
    label: str
    dominant_expert: int
    weight_vector: tuple[float, ...]


def classify_battery(weights: np.ndarray, stage_map: StageMap) -> ClassLabel:
    """Three-path rule on the dominant expert; ties go to the lowest index."""
    weights = np.asarray(weights, dtype=np.float64)
    dominant = int(np.argmax(weights))
    if dominant == stage_map.early_expert:
        label = "Excellent"
    elif dominant == stage_map.late_expert:
        label = "Scrap"
    else:
        label = "Qualified"
    return ClassLabel(label=label, dominant_expert=dominant, weight_vector=tuple(weights))


@dataclass(frozen=True)
class ConfidenceRow:
    soh_percent: int
    total: int
    n_excellent: int
    n_qualified: int
    n_scrap: int
    confidence_percent: float | None


def confidence_table(labels_by_bucket: dict[int, list[str]]) -> list[ConfidenceRow]:
    """Per SOH bucket: label counts and the fraction matching the expected label.

    The 85 percent bucket has no expected label and reports no confidence;
    empty buckets are omitted.
    """
    rows = []
    for bucket in sorted(labels_by_bucket, reverse=True):
        labels = labels_by_bucket[bucket]
        if not labels:
            continue
        counts = {name: labels.count(name) for name in LABELS}
        expected = BUCKET_EXPECTED_LABEL.get(bucket)
        confidence = None
        if expected is not None:
            confidence = 100.0 * counts[expected] / len(labels)
        rows.append(
            ConfidenceRow(
                soh_percent=bucket,
                total=len(labels),
                n_excellent=counts["Excellent"],
                n_qualified=counts["Qualified"],
                n_scrap=counts["Scrap"],
                confidence_percent=confidence,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# exact t-SNE
# ---------------------------------------------------------------------------


def conditional_probabilities(
    sq_dists: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 64
) -> np.ndarray:
    """Row-wise conditional p_{j|i} with per-row precision found by bisection."""
    n = sq_dists.shape[0]
    target_entropy = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        beta, beta_lo, beta_hi = 1.0, 0.0, np.inf
        d = np.delete(sq_dists[i], i)
        for _ in range(max_iter):
            w = np.exp(-d * beta)
            total = w.sum()
            if total <= 0:
                entropy = 0.0
                probs = np.zeros_like(w)
            else:
                probs = w / total
                nonzero = probs > 0
                entropy = -np.sum(probs[nonzero] * np.log(probs[nonzero]))
            if abs(entropy - target_entropy) < tol:
                break
            if entropy > target_entropy:
                beta_lo = beta
                beta = beta * 2.0 if beta_hi == np.inf else (beta + beta_hi) / 2.0
            else:
                beta_hi = beta
                beta = beta / 2.0 if beta_lo == 0.0 else (beta + beta_lo) / 2.0
        row = np.insert(probs, i, 0.0)
        p[i] = row
    return p


def _kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _low_dim_affinities(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.sum(y * y, axis=1)
    num = 1.0 / (1.0 + d[:, None] + d[None, :] - 2.0 * (y @ y.T))
    np.fill_diagonal(num, 0.0)
    q = num / num.sum()
    return np.maximum(q, 1e-12), num


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_trace: list[float]
    final_kl: float
    perplexity_used: float


def tsne_embed(
    x: np.ndarray,
    perplexity: float = 30.0,
    iters: int = 1000,
    seed: int = 0,
    learning_rate: float | None = None,
    early_exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
) -> TsneResult:
    """Exact O(n^2) t-SNE of row vectors into 2-D.

    Pairwise Gaussian conditionals are matched to the perplexity by
    bisection, symmetrized, and the embedding descends the KL divergence
    with momentum and early exaggeration. The default learning rate is
    max(n / early_exaggeration / 4, 50). The KL trace is evaluated against
    the unexaggerated affinities.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 5:
        raise InvalidArgument(f"need at least 5 points for an embedding, got {n}")
    max_perp = (n - 1) / 3.0
    if perplexity > max_perp:
        warnings.warn(
            f"perplexity {perplexity} too large for {n} points; capping at {max_perp:.1f}",
            stacklevel=2,
        )
        perplexity = max_perp
    if learning_rate is None:
        learning_rate = max(n / early_exaggeration / 4.0, 50.0)
    exaggeration_iters = min(exaggeration_iters, iters // 2)

    sq = np.sum(x * x, axis=1)
    sq_dists = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    cond = conditional_probabilities(sq_dists, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    q, _ = _low_dim_affinities(y)
    kl_trace = [_kl_divergence(p, q)]

    for it in range(iters):
        exaggerate = early_exaggeration if it < exaggeration_iters else 1.0
        q, num = _low_dim_affinities(y)
        pq = (exaggerate * p - q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
        momentum = 0.5 if it < exaggeration_iters else 0.8
        velocity = momentum * velocity - learning_rate * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        if (it + 1) % 25 == 0:
            q, _ = _low_dim_affinities(y)
            kl_trace.append(_kl_divergence(p, q))

    q, _ = _low_dim_affinities(y)
    final_kl = _kl_divergence(p, q)
    return TsneResult(
        embedding=y, kl_trace=kl_trace, final_kl=final_kl, perplexity_used=perplexity
    )


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------


@dataclass
class BatteryEval:
    battery_id: str
    condition_tag: str
    n_samples: int
    rmse: float
    mape_percent: float
    r2: float
    mae: float
    mean_inference_ms: float


@dataclass
class ConditionAggregate:
    condition_tag: str
    n_batteries: int
    rmse: float
    mape_percent: float
    r2: float
    mae: float


@dataclass
class EvalReport:
    per_battery: list[BatteryEval]
    per_condition: list[ConditionAggregate]
    latency: dict
    meta: dict
    classification: list[dict] = field(default_factory=list)
    confidence: list[ConfidenceRow] = field(default_factory=list)

    def overall(self) -> dict:
        return {
            "mape_percent": float(np.mean([r.mape_percent for r in self.per_battery])),
            "rmse": float(np.mean([r.rmse for r in self.per_battery])),
            "mae": float(np.mean([r.mae for r in self.per_battery])),
            "r2": float(np.nanmean([r.r2 for r in self.per_battery])),
        }

    def to_json_dict(self) -> dict:
        def clean(value):
            if isinstance(value, float) and math.isnan(value):
                return None
            return value

        return {
            "meta": self.meta,
            "overall": {k: clean(v) for k, v in self.overall().items()},
            "per_battery": [
                {k: clean(v) for k, v in vars(row).items()} for row in self.per_battery
            ],
            "per_condition": [
                {k: clean(v) for k, v in vars(row).items()} for row in self.per_condition
            ],
            "classification": self.classification,
            "confidence": [vars(r) for r in self.confidence],
            "latency": self.latency,
        }


def evaluate_model(
    model,
    ds: Dataset,
    battery_ids,
    prep=None,
    horizon: int | None = None,
) -> EvalReport:
    """Predict every sample of the listed batteries and aggregate metrics.

    Metrics are computed on capacity as percent of nominal. Per-condition
    aggregates are plain means of the per-battery rows, so they can be
    recomputed from the report itself.
    """
    prep = prep or trainer_mod.PreprocessConfig()
    horizon = horizon or model.spec.horizon
    by_battery = trainer_mod.prepare_samples(ds, battery_ids, model.config, prep)

    rows: list[BatteryEval] = []
    all_ms: list[float] = []
    for bid in battery_ids:
        samples = by_battery[bid]
        if not samples:
            continue
        tag = battery_condition_tag(ds.get(bid))
        metrics = []
        times = []
        for s in samples:
            traj = fornn.predict_trajectory(s, model, horizon=horizon)
            truth = 100.0 * s.target_mah[:horizon] / s.nominal_capacity_mah
            pred = 100.0 * traj.values_soh
            metrics.append(compute_metrics(pred, truth))
            times.append(traj.inference_ms)
        rows.append(
            BatteryEval(
                battery_id=bid,
                condition_tag=tag,
                n_samples=len(samples),
                rmse=float(np.mean([m.rmse for m in metrics])),
                mape_percent=float(np.mean([m.mape_percent for m in metrics])),
                r2=float(np.nanmean([m.r2 for m in metrics])),
                mae=float(np.mean([m.mae for m in metrics])),
                mean_inference_ms=float(np.mean(times)),
            )
        )
        all_ms.extend(times)

    tags = sorted({r.condition_tag for r in rows})
    aggregates = []
    for tag in tags:
        grp = [r for r in rows if r.condition_tag == tag]
        aggregates.append(
            ConditionAggregate(
                condition_tag=tag,
                n_batteries=len(grp),
                rmse=float(np.mean([r.rmse for r in grp])),
                mape_percent=float(np.mean([r.mape_percent for r in grp])),
                r2=float(np.nanmean([r.r2 for r in grp])),
                mae=float(np.mean([r.mae for r in grp])),
            )
        )

    latency = {
        "n_predictions": len(all_ms),
        "mean_ms": float(np.mean(all_ms)) if all_ms else math.nan,
        "median_ms": float(np.median(all_ms)) if all_ms else math.nan,
    }
    meta = {
        "units": "capacity as percent of nominal (SOH x 100)",
        "horizon": horizon,
        "variant": model.spec.variant,
        "feature_mode": model.config.feature_mode,
        "dataset": ds.name,
    }
    return EvalReport(
        per_battery=rows, per_condition=aggregates, latency=latency, meta=meta
    )
