"""Evaluation metrics over epistemic models.

Covers accuracy, expected calibration error, marginal negative
log-likelihood, dyadic joint log-loss, corruption-error aggregation
(mCE), OOD detection via AUPR on negative max-probability scores,
confidence score, confident-failure rate, and post-hoc temperature
re-scaling (tuning plus with/without ratio reports).

All accumulation is float64; every function is a pure function of
(model, data, seed), so re-running with the same seeds reproduces each
number bit-identically. Temperature always divides the logits inside the
per-index softmax, before index averaging, so argmax-based quantities
(accuracy, corruption errors, mCE) are invariant to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .enn import index_batch, log_mean_exp, masked_log_softmax
from .errors import ContractError, DegenerateBaselineError, NonFiniteError

DEFAULT_N_INDEX = 1000


@dataclass
class DyadicConfig:
    """Batch construction for joint log-loss evaluation.

    Each evaluation batch resamples ``tau`` slots i.i.d. from two distinct
    anchor examples, stressing cross-input correlations.
    """

    tau: int = 10
    n_batches: int = 1000
    n_index: int = DEFAULT_N_INDEX
    seed: int = 0

    def __post_init__(self):
        if self.tau < 2:
            raise ContractError(f"dyadic batches need tau >= 2, got {self.tau}")
        if self.n_batches < 1 or self.n_index < 1:
            raise ContractError("n_batches and n_index must be >= 1")


@dataclass
class Temperature:
    """A tuned logit divisor and the dataset it was tuned on."""

    value: float
    tuned_on: str = ""

    def __post_init__(self):
        if not self.value > 0:
            raise ContractError(f"temperature must be > 0, got {self.value}")


def _dataset_arrays(dataset):
    if isinstance(dataset, tuple):
        xs, ys = dataset
    else:
        xs, ys = dataset.images, dataset.labels
    xs = np.asarray(xs)
    ys = np.asarray(ys, dtype=np.int64)
    if len(xs) == 0:
        raise ContractError("empty dataset")
    if len(xs) != len(ys):
        raise ContractError(f"{len(xs)} inputs but {len(ys)} labels")
    return xs, ys


class PredictiveEvaluation:
    """Shared per-(model, dataset) evaluation state.

    Computes the (N, K, C) logit grid once; every metric (at any
    temperature) derives from it, so a full metric sweep costs one model
    pass. The per-metric functions below are thin wrappers.
    """

    def __init__(self, model, dataset, n_index: int = DEFAULT_N_INDEX, seed=0):
        self.xs, self.labels = _dataset_arrays(dataset)
        self.model = model
        zs = index_batch(model.reference, n_index, seed)
        self.grid = model.logit_grid(self.xs, zs)
        self._lp_cache: dict = {}
        self._marginal_cache: dict = {}
        self._pred = None

    @property
    def n(self) -> int:
        return len(self.labels)

    def log_probs(self, temperature: float = 1.0) -> np.ndarray:
        """(N, K, C) per-index log-probabilities (two-slot cache)."""
        if temperature not in self._lp_cache:
            if len(self._lp_cache) >= 2:
                self._lp_cache.pop(next(iter(self._lp_cache)))
            self._lp_cache[temperature] = masked_log_softmax(
                self.grid, self.model.class_mask, temperature)
        return self._lp_cache[temperature]

    def marginal_log_probs(self, temperature: float = 1.0) -> np.ndarray:
        if temperature not in self._marginal_cache:
            if len(self._marginal_cache) >= 2:
                self._marginal_cache.pop(next(iter(self._marginal_cache)))
            self._marginal_cache[temperature] = log_mean_exp(self.log_probs(temperature), axis=1)
        return self._marginal_cache[temperature]

    def marginal_probs(self, temperature: float = 1.0) -> np.ndarray:
        return np.exp(self.marginal_log_probs(temperature))

    def predictions(self) -> np.ndarray:
        """Predicted class per example: argmax of the untempered marginal,
        ties to the lowest class id.

        Temperature re-scaling is calibration-only by definition, so it
        never changes predicted classes (nor accuracy or corruption
        errors), even for index-dependent models whose tempered mixture
        could otherwise flip a near-tie.
        """
        if self._pred is None:
            self._pred = self.marginal_log_probs(1.0).argmax(axis=1)
        return self._pred

    def accuracy(self, temperature: float = 1.0) -> float:
        return float((self.predictions() == self.labels).mean())

    def confidence(self, temperature: float = 1.0) -> float:
        """Mean probability assigned to the predicted label."""
        probs = self.marginal_probs(temperature)
        return float(probs[np.arange(self.n), self.predictions()].mean())

    def failure_rate(self, threshold: float = 0.95, temperature: float = 1.0) -> float:
        if not 0 < threshold < 1:
            raise ContractError(f"threshold must be in (0, 1), got {threshold}")
        probs = self.marginal_probs(temperature)
        wrong = self.predictions() != self.labels
        certain = probs[np.arange(self.n), self.predictions()] > threshold
        return float((wrong & certain).mean())

    def marginal_nll(self, temperature: float = 1.0) -> float:
        lp = self.marginal_log_probs(temperature)
        return float(-lp[np.arange(self.n), self.labels].mean())

    def ece(self, n_bins: int = 10, temperature: float = 1.0) -> float:
        if n_bins < 1:
            raise ContractError(f"n_bins must be >= 1, got {n_bins}")
        probs = self.marginal_probs(temperature)
        conf = probs[np.arange(self.n), self.predictions()]
        correct = self.predictions() == self.labels
        # equal-width bins over (0, 1], right-closed
        bins = np.minimum(np.ceil(conf * n_bins).astype(int) - 1, n_bins - 1)
        bins = np.maximum(bins, 0)
        total = 0.0
        for b in range(n_bins):
            sel = bins == b
            n_b = int(sel.sum())
            if n_b == 0:
                continue
            gap = abs(float(correct[sel].mean()) - float(conf[sel].mean()))
            total += n_b * gap
        return total / self.n

    def label_index_logprobs(self, temperature: float = 1.0) -> np.ndarray:
        """(N, K) per-index log-probability at each example's own label."""
        return self.log_probs(temperature)[np.arange(self.n), :, self.labels]

    def dyadic_batch_scores(self, tau: int, n_batches: int, seed=0,
                            temperature: float = 1.0) -> np.ndarray:
        """Per-batch joint NLL, normalized per label (divided by tau)."""
        if self.n < 2:
            raise ContractError("dyadic sampling needs at least 2 examples")
        ll = self.label_index_logprobs(temperature)  # (N, K)
        rng = np.random.default_rng(np.random.SeedSequence([*_seed_entropy(seed), 101]))
        a1 = rng.integers(0, self.n, size=n_batches)
        a2 = (a1 + 1 + rng.integers(0, self.n - 1, size=n_batches)) % self.n
        picks = rng.integers(0, 2, size=(n_batches, tau))
        c2 = picks.sum(axis=1)
        c1 = tau - c2
        per_index = c1[:, None] * ll[a1] + c2[:, None] * ll[a2]  # (B, K)
        return -log_mean_exp(per_index, axis=1) / tau

    def dyadic_joint_nll(self, config: DyadicConfig, temperature: float = 1.0) -> float:
        return float(self.dyadic_batch_scores(
            config.tau, config.n_batches, config.seed, temperature
        ).mean())


def _seed_entropy(seed) -> list:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


# -- per-metric wrappers -----------------------------------------------------------


def accuracy(model, dataset, n_index: int = DEFAULT_N_INDEX, seed=0,
             temperature: float = 1.0) -> float:
    """Fraction of examples whose marginal-probability argmax matches the
    label; ties break to the lowest class id."""
    return PredictiveEvaluation(model, dataset, n_index, seed).accuracy(temperature)


def ece(model, dataset, n_bins: int = 10, n_index: int = DEFAULT_N_INDEX, seed=0,
        temperature: float = 1.0) -> float:
    """Expected calibration error over equal-width confidence bins."""
    return PredictiveEvaluation(model, dataset, n_index, seed).ece(n_bins, temperature)


def marginal_nll(model, dataset, n_index: int = DEFAULT_N_INDEX, seed=0,
                 temperature: float = 1.0) -> float:
    """Mean negative log marginal probability of the true labels."""
    return PredictiveEvaluation(model, dataset, n_index, seed).marginal_nll(temperature)


def confidence_score(model, dataset, n_index: int = DEFAULT_N_INDEX, seed=0,
                     temperature: float = 1.0) -> float:
    """Mean probability assigned to the predicted label."""
    return PredictiveEvaluation(model, dataset, n_index, seed).confidence(temperature)


def failure_rate(model, dataset, threshold: float = 0.95, n_index: int = DEFAULT_N_INDEX,
                 seed=0, temperature: float = 1.0) -> float:
    """Fraction predicted wrongly with confidence strictly above the
    threshold."""
    return PredictiveEvaluation(model, dataset, n_index, seed).failure_rate(threshold, temperature)


def dyadic_joint_nll(model, dataset, config: DyadicConfig | None = None,
                     temperature: float = 1.0) -> float:
    """Mean per-label joint NLL over dyadic evaluation batches.

    Each batch draws two distinct anchors uniformly, fills ``tau`` slots
    i.i.d. from them (keeping true labels), and scores the joint
    log-probability of the label combination divided by tau, so values
    share a scale with the marginal NLL.
    """
    config = config or DyadicConfig()
    pe = PredictiveEvaluation(model, dataset, config.n_index, config.seed)
    return pe.dyadic_joint_nll(config, temperature)


def mce(model_errors: dict, baseline_errors: dict) -> float:
    """Mean corruption error.

    Inputs map corruption type -> per-severity error sequence. Per type,
    the model's summed errors are divided by the baseline's summed errors;
    mCE is the unweighted mean of those ratios over types.
    """
    if set(model_errors) != set(baseline_errors):
        raise ContractError(
            f"corruption grids differ: {sorted(model_errors)} vs {sorted(baseline_errors)}"
        )
    if not model_errors:
        raise ContractError("empty corruption grid")
    ratios = []
    for ctype in sorted(model_errors):
        model_vals = np.asarray(model_errors[ctype], dtype=np.float64)
        base_vals = np.asarray(baseline_errors[ctype], dtype=np.float64)
        if model_vals.shape != base_vals.shape:
            raise ContractError(f"severity grids differ for type {ctype!r}")
        denom = base_vals.sum()
        if denom <= 0:
            raise DegenerateBaselineError(
                f"baseline errors sum to zero for corruption type {ctype!r}"
            )
        ratios.append(model_vals.sum() / denom)
    return float(np.mean(ratios))


def anomaly_scores(model, dataset, n_index: int = DEFAULT_N_INDEX, seed=0,
                   temperature: float = 1.0) -> np.ndarray:
    """Negative max class probability per example (higher = more anomalous)."""
    pe = PredictiveEvaluation(model, dataset, n_index, seed)
    return -pe.marginal_probs(temperature).max(axis=1)


def aupr(in_dist_scores, ood_scores) -> float:
    """Area under the precision-recall curve with OOD as the positive class.

    Scores are sorted descending; tied scores form one threshold group;
    the area is the average-precision sum of (delta recall) * precision.
    """
    in_scores = np.asarray(in_dist_scores, dtype=np.float64)
    out_scores = np.asarray(ood_scores, dtype=np.float64)
    if in_scores.size == 0 or out_scores.size == 0:
        raise ContractError("both score lists must be non-empty")
    scores = np.concatenate([in_scores, out_scores])
    labels = np.concatenate([np.zeros(in_scores.size), np.ones(out_scores.size)])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    total_pos = labels.sum()
    tp = np.cumsum(labels)
    k = np.arange(1, len(scores) + 1)
    # last position of each tie group
    group_end = np.nonzero(np.append(scores[1:] != scores[:-1], True))[0]
    precision = tp[group_end] / k[group_end]
    recall = tp[group_end] / total_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


# -- temperature ----------------------------------------------------------------


def tune_temperature(model, dataset, n_index: int = DEFAULT_N_INDEX, seed=0, *,
                     low: float = 0.1, high: float = 10.0, tol: float = 1e-3) -> Temperature:
    """Temperature minimizing marginal NLL on an in-distribution set.

    Golden-section search over log T in [log low, log high] to ``tol`` in
    log T. The temperature divides the logits inside each per-index
    softmax, before index averaging.
    """
    pe = PredictiveEvaluation(model, dataset, n_index, seed)

    def nll_at(log_t: float) -> float:
        value = pe.marginal_nll(temperature=math.exp(log_t))
        if not math.isfinite(value):
            raise NonFiniteError(f"temperature search: non-finite NLL at T={math.exp(log_t):g}")
        return value

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = math.log(low), math.log(high)
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = nll_at(c), nll_at(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = nll_at(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = nll_at(d)
    tuned_on = getattr(dataset, "split", "") if not isinstance(dataset, tuple) else ""
    return Temperature(value=math.exp((a + b) / 2.0), tuned_on=str(tuned_on))


def ratio_or_none(with_value: float, without_value: float):
    """with/without ratio; None when the denominator is zero."""
    if without_value == 0:
        return None
    return with_value / without_value


def temperature_ratio_report(model, temperature, suite, *, n_index: int = DEFAULT_N_INDEX,
                             seed=0, dyadic: DyadicConfig | None = None, ece_bins: int = 10,
                             failure_threshold: float = 0.95) -> list:
    """Per-dataset with/without temperature ratios across a shift suite.

    Emits one record per (dataset, metric) with fields ``with_t``,
    ``without_t``, and ``ratio`` (None plus a note when the untempered
    metric is zero). Accuracy and mCE ratios are exactly 1 for any
    temperature because argmax is scale-invariant.
    """
    from .enn import restrict_classes  # local import to avoid cycle at module load

    t = temperature.value if isinstance(temperature, Temperature) else float(temperature)
    if t <= 0:
        raise ContractError(f"temperature must be > 0, got {t}")
    dyadic = dyadic or DyadicConfig(n_index=n_index, seed=_seed_entropy(seed)[0])
    records = []

    def add(dataset_name, metric, with_t, without_t, ctype="", severity=None):
        ratio = ratio_or_none(with_t, without_t)
        records.append({
            "dataset": dataset_name, "metric": metric, "with_t": with_t,
            "without_t": without_t, "ratio": ratio,
            "note": "" if ratio is not None else "untempered metric is zero",
            "corruption_type": ctype, "severity": severity,
        })

    errors_with: dict = {}
    errors_without: dict = {}
    for idx, (name, ds) in enumerate(suite.datasets()):
        if name == "ood":
            continue
        eval_model = model
        if name == "adversarial":
            if len(ds) == 0:
                continue
            eval_model = restrict_classes(model, suite.class_subset)
        pe = PredictiveEvaluation(eval_model, ds, n_index, [*_seed_entropy(seed), idx])
        ctype = ds.provenance.get("corruption", "")
        severity = ds.provenance.get("severity")
        add(name, "accuracy", pe.accuracy(t), pe.accuracy(), ctype, severity)
        add(name, "ece", pe.ece(ece_bins, t), pe.ece(ece_bins), ctype, severity)
        add(name, "marginal_nll", pe.marginal_nll(t), pe.marginal_nll(), ctype, severity)
        add(name, "joint_nll", pe.dyadic_joint_nll(dyadic, t), pe.dyadic_joint_nll(dyadic),
            ctype, severity)
        if ctype:
            errors_with.setdefault(ctype, []).append(1.0 - pe.accuracy(t))
            errors_without.setdefault(ctype, []).append(1.0 - pe.accuracy())

    if errors_without:
        # The mCE normalizer cancels in a with/without ratio, so the model's
        # own untempered grid serves as the baseline; mce(without, without)
        # is exactly 1.
        try:
            add("corruption-grid", "mce", mce(errors_with, errors_without),
                mce(errors_without, errors_without))
        except DegenerateBaselineError:
            add("corruption-grid", "mce", 0.0, 0.0)

    restricted = restrict_classes(model, suite.class_subset)
    in_with = anomaly_scores(restricted, suite.test, n_index, seed, t)
    in_without = anomaly_scores(restricted, suite.test, n_index, seed)
    ood_with = anomaly_scores(restricted, suite.ood, n_index, seed, t)
    ood_without = anomaly_scores(restricted, suite.ood, n_index, seed)
    add("ood", "aupr", aupr(in_with, ood_with), aupr(in_without, ood_without))
    return records
