"""Evaluation: CI index (exact bridge and Monte Carlo), loss/accuracy,
and feature-distribution divergence probes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cld_core import CldFamily, Dataset, DomainSpec, sample_dataset
from .errors import InvalidDistribution, ShapeMismatch, TooFewDomains, TooFewExamples
from .diffkit import Model, forward
from .oracle import PredictorTable, exact_accuracy, exact_loss, predictor_table
from .rng import substream

__all__ = [
    "CiEstimate",
    "EvalResult",
    "FeatureDivergences",
    "ci_index_mc",
    "evaluate",
    "evaluate_exact",
    "feature_divergences",
    "jsd_base2",
    "model_features",
    "tabulate",
]


def _check_dist(name: str, v: np.ndarray) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidDistribution(f"{name} must be a vector, got shape {arr.shape}")
    if np.any(arr < 0):
        raise InvalidDistribution(f"{name} has a negative entry")
    if abs(float(arr.sum()) - 1.0) > 1e-9:
        raise InvalidDistribution(f"{name} sums to {arr.sum()!r}, not 1")
    return arr


def jsd_base2(p, q) -> float:
    """Jensen-Shannon divergence with base-2 logarithm; symmetric, in [0, 1].

    Both halves are computed against the same midpoint, so jsd_base2(p, q)
    and jsd_base2(q, p) are bitwise equal.
    """
    pa = _check_dist("p", p)
    qa = _check_dist("q", q)
    if pa.shape != qa.shape:
        raise InvalidDistribution(
            f"p and q have different lengths {pa.shape[0]} vs {qa.shape[0]}"
        )
    m = (pa + qa) / 2.0

    def kl2(a: np.ndarray) -> float:
        mask = a > 0.0
        return float((a[mask] * np.log2(a[mask] / m[mask])).sum())

    val = 0.5 * kl2(pa) + 0.5 * kl2(qa)
    return min(1.0, max(0.0, val))


def _jsd2_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise base-2 JSD for stacked distribution pairs (no validation)."""
    m = (p + q) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        tp = np.where(p > 0.0, p * np.log2(np.where(p > 0.0, p / m, 1.0)), 0.0)
        tq = np.where(q > 0.0, q * np.log2(np.where(q > 0.0, q / m, 1.0)), 0.0)
    return np.clip(0.5 * tp.sum(axis=1) + 0.5 * tq.sum(axis=1), 0.0, 1.0)


def tabulate(model: Model, family: CldFamily) -> PredictorTable:
    """Evaluate the model on every observation index; exact conditional table."""
    xs = np.arange(family.spaces.n_obs)
    _, _, probs, _ = forward(model, xs)
    return predictor_table(probs.val)


@dataclass(frozen=True)
class CiEstimate:
    """Monte Carlo causal-invariance index: 1 - mean JSD over sampled pairs."""

    value: float
    stderr: float
    n_pairs: int
    style: str


def ci_index_mc(model: Model, family: CldFamily, domain: DomainSpec,
                n_pairs: int, reps: int = 1, style: str = "marginal",
                seed: int = 0) -> CiEstimate:
    """Estimate the CI index by sampling non-core swap pairs.

    Fused conditionals are approximated by averaging model predictions, in
    probability space, over `reps` draws of x given each latent pair.  For
    deterministic families one rep already gives the exact fused row.
    """
    if n_pairs < 1:
        raise ShapeMismatch("n_pairs must be >= 1")
    if reps < 1:
        raise ShapeMismatch("reps must be >= 1")
    if style not in ("marginal", "uniform"):
        raise ShapeMismatch(f"unknown pair style {style!r}")
    s = family.spaces
    rng = substream(seed, "eval")
    table = tabulate(model, family).p_yhat_given_x

    cn_flat = domain.p_cn.reshape(-1)
    cn = rng.choice(cn_flat.size, size=n_pairs, p=cn_flat)
    c, xn = cn // s.n_noncore, cn % s.n_noncore
    if style == "marginal":
        xn_t = rng.choice(s.n_noncore, size=n_pairs, p=domain.noncore_marginal())
    else:
        xn_t = rng.integers(0, s.n_noncore, size=n_pairs)

    def fused_rows(cc: np.ndarray, nn: np.ndarray) -> np.ndarray:
        out = np.zeros((n_pairs, s.n_classes))
        pmf = family.p_x_given_cn[cc, nn]  # [n_pairs, n_obs]
        cdf = np.cumsum(pmf, axis=1)
        cdf[:, -1] = 1.0
        for _ in range(reps):
            u = rng.random(n_pairs)
            xs = np.minimum((cdf < u[:, None]).sum(axis=1), s.n_obs - 1)
            out += table[xs]
        return out / reps

    jsds = _jsd2_rows(fused_rows(c, xn), fused_rows(c, xn_t))
    value = float(1.0 - jsds.mean())
    stderr = float(jsds.std(ddof=1) / np.sqrt(n_pairs)) if n_pairs > 1 else 0.0
    return CiEstimate(value=value, stderr=stderr, n_pairs=n_pairs, style=style)


@dataclass(frozen=True)
class EvalResult:
    """Loss in nats plus argmax accuracy on one domain; n = 0 marks the
    closed-form variant."""

    domain_id: str
    loss: float
    accuracy: float
    n: int


def evaluate(model: Model, family: CldFamily, domain: DomainSpec,
             n: int, seed: int = 0) -> EvalResult:
    """Sampled loss/accuracy; converges to the exact values at O(1/sqrt(n))."""
    if n < 1:
        raise ShapeMismatch("n must be >= 1")
    data = sample_dataset(family, domain, n, seed)
    table = tabulate(model, family).p_yhat_given_x
    picked = table[data.x, data.y]
    loss = float(-np.log(picked).mean())
    acc = float((table[data.x].argmax(axis=1) == data.y).mean())
    return EvalResult(domain_id=domain.domain_id, loss=loss, accuracy=acc, n=n)


def evaluate_exact(model: Model, family: CldFamily,
                   domain: DomainSpec) -> EvalResult:
    table = tabulate(model, family)
    return EvalResult(
        domain_id=domain.domain_id,
        loss=exact_loss(family, domain, table),
        accuracy=exact_accuracy(family, domain, table),
        n=0,
    )


def model_features(model: Model, xs: np.ndarray) -> np.ndarray:
    """Last-hidden-layer features as a plain array (no graph)."""
    h, _, _, _ = forward(model, xs)
    return h.val


def _np_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return (d * d).sum(axis=2)


def _np_mmd(fa: np.ndarray, fb: np.ndarray, wa: np.ndarray, wb: np.ndarray,
            bandwidth: float) -> float:
    """Weighted unbiased Gaussian-kernel MMD^2 estimate (may be negative)."""
    kaa = np.exp(-_np_sq_dists(fa, fa) / bandwidth)
    kbb = np.exp(-_np_sq_dists(fb, fb) / bandwidth)
    kab = np.exp(-_np_sq_dists(fa, fb) / bandwidth)
    np.fill_diagonal(kaa, 0.0)
    np.fill_diagonal(kbb, 0.0)
    taa = float(wa @ kaa @ wa) / (1.0 - float(wa @ wa))
    tbb = float(wb @ kbb @ wb) / (1.0 - float(wb @ wb))
    tab = float(wa @ kab @ wb)
    return taa + tbb - 2.0 * tab


def _np_coral(fa: np.ndarray, fb: np.ndarray, wa: np.ndarray,
              wb: np.ndarray) -> float:
    """Squared mean difference plus squared Frobenius covariance difference."""
    mu_a = wa @ fa
    mu_b = wb @ fb
    da, db = fa - mu_a, fb - mu_b
    ca = (da * wa[:, None]).T @ da
    cb = (db * wb[:, None]).T @ db
    dm = mu_a - mu_b
    dc = ca - cb
    return float(dm @ dm) + float((dc * dc).sum())


def _median_sq_dist(feats: list[np.ndarray]) -> float:
    pooled = np.vstack(feats)
    d = _np_sq_dists(pooled, pooled)
    iu = np.triu_indices(pooled.shape[0], 1)
    vals = np.sort(d[iu])
    if vals.size == 0:
        return 1e-12
    k = vals.size
    med = vals[k // 2] if k % 2 == 1 else 0.5 * (vals[k // 2 - 1] + vals[k // 2])
    return max(float(med), 1e-12)


@dataclass(frozen=True)
class FeatureDivergences:
    """Empirical feature-distribution distances, averaged over domain pairs.

    MMD values are raw unbiased estimates and may be slightly negative when
    the distributions coincide.  per_class maps a class index to its
    (mmd, coral) pair; normalized holds the class-prior-normalized pooled
    marginal's (mmd, coral).
    """

    mmd: float
    coral: float
    bandwidth: float
    per_class: dict[int, tuple[float, float]] | None = None
    normalized: tuple[float, float] | None = None


def _pairwise(feats: list[np.ndarray], weights: list[np.ndarray],
              bandwidth: float) -> tuple[float, float]:
    mmds, corals = [], []
    for i in range(len(feats)):
        for j in range(i + 1, len(feats)):
            mmds.append(_np_mmd(feats[i], feats[j], weights[i], weights[j],
                                bandwidth))
            corals.append(_np_coral(feats[i], feats[j], weights[i], weights[j]))
    return float(np.mean(mmds)), float(np.mean(corals))


def feature_divergences(model: Model, datasets: list[Dataset],
                        per_class: bool = False) -> FeatureDivergences:
    """MMD and CORAL distances between per-domain feature clouds.

    With per_class=True, also computes the distances restricted to each
    class and for the pooled marginal reweighted so every class present in
    a domain contributes equally (each example weighted 1 / (K_d * n_dy)).
    The kernel bandwidth is the median pooled squared distance of the full
    marginal clouds and is reused for the conditional probes.
    """
    if len(datasets) < 2:
        raise TooFewDomains("feature_divergences needs >= 2 domains")
    for ds in datasets:
        if len(ds) < 2:
            raise TooFewExamples(f"domain {ds.domain_id!r} has {len(ds)} examples")
    feats = [model_features(model, ds.x) for ds in datasets]
    uniform = [np.full(len(ds), 1.0 / len(ds)) for ds in datasets]
    bw = _median_sq_dist(feats)
    mmd, coral = _pairwise(feats, uniform, bw)
    if not per_class:
        return FeatureDivergences(mmd=mmd, coral=coral, bandwidth=bw)

    classes = sorted({int(v) for ds in datasets for v in np.unique(ds.y)})
    by_class: dict[int, tuple[float, float]] = {}
    for y in classes:
        sub = []
        for k, ds in enumerate(datasets):
            rows = feats[k][ds.y == y]
            if rows.shape[0] < 2:
                raise TooFewExamples(
                    f"class {y} has {rows.shape[0]} examples in domain "
                    f"{ds.domain_id!r}"
                )
            sub.append(rows)
        subw = [np.full(f.shape[0], 1.0 / f.shape[0]) for f in sub]
        by_class[y] = _pairwise(sub, subw, bw)

    balanced = []
    for ds in datasets:
        w = np.empty(len(ds))
        present = np.unique(ds.y)
        for y in present:
            sel = ds.y == y
            w[sel] = 1.0 / (present.size * sel.sum())
        balanced.append(w)
    normalized = _pairwise(feats, balanced, bw)
    return FeatureDivergences(mmd=mmd, coral=coral, bandwidth=bw,
                              per_class=by_class, normalized=normalized)
