"""Propensity-score machinery: fitting, matching, weighting, stratification.

The score models membership in the concurrent trial against all pooled
historical controls, fit on the reduced concurrent arm plus every
historical pool. Downstream estimators either match historical controls
to concurrent subjects (1:1 nearest neighbor with replacement under a
caliper), reweight them by the odds ps/(1-ps) with symmetric trimming,
or stratify the pooled sample by concurrent-score quantiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .metrics import EffectEstimate
from .regress import fit_ols, fit_logistic, sandwich_se, wald_decision
from .trialdata import SubjectGroup, TrialDataset

__all__ = [
    "COVSETS",
    "covset_columns",
    "PsFit",
    "MatchSet",
    "WeightSet",
    "estimate_ps",
    "match_nearest",
    "ipw_weights",
    "stratify",
    "unadjusted_effect",
    "estimate_psm",
    "estimate_psw",
]

COVSETS = (1, 2, 3)

DEFAULT_CALIPER_MULT = 0.2
DEFAULT_WEIGHT_BOUNDS = (0.05, 20.0)


def covset_columns(covset: int, n_cols: int) -> tuple[int, ...]:
    """Column indices for a covariate-set id.

    Set 1 uses every covariate, set 2 drops x4, set 3 keeps only
    x1..x3. Sets 2 and 3 model progressively less of the selection
    mechanism and are how misspecification enters the simulations.
    """
    if covset == 1:
        return tuple(range(n_cols))
    if covset == 2:
        if n_cols < 4:
            raise ValueError("covariate set 2 (drop x4) needs at least four covariates")
        return tuple(j for j in range(n_cols) if j != 3)
    if covset == 3:
        if n_cols < 3:
            raise ValueError("covariate set 3 (keep x1..x3) needs at least three covariates")
        return (0, 1, 2)
    raise ValueError(f"unknown covariate set {covset!r} (expected 1, 2 or 3)")


@dataclass
class PsFit:
    """Fitted propensity scores on the pooled analysis sample.

    ``sample`` stacks the reduced concurrent subjects and all historical
    pools in that order; ``ps`` and ``logit_ps`` align with its rows.
    """

    sample: SubjectGroup
    ps: np.ndarray
    logit_ps: np.ndarray
    model_spec: int
    fit: object

    @property
    def is_concurrent(self) -> np.ndarray:
        return self.sample.trial == 0

    def positions(self, ids: np.ndarray) -> np.ndarray:
        lookup = {int(s): i for i, s in enumerate(self.sample.ids)}
        try:
            return np.array([lookup[int(s)] for s in ids], dtype=int)
        except KeyError as exc:
            raise ValueError(f"subject id {exc.args[0]} is not in the fitted sample")


@dataclass(frozen=True)
class MatchSet:
    """Pairs of (concurrent id, matched historical id) plus the unmatched."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_concurrent: tuple[int, ...]
    caliper: float


@dataclass(frozen=True)
class WeightSet:
    """Weights aligned with a PsFit sample; trimmed historical rows get 0."""

    weights: np.ndarray
    trimmed_ids: tuple[int, ...]
    bounds: tuple[float, float]


def estimate_ps(dataset: TrialDataset, covset: int) -> PsFit:
    """Fit the concurrent-membership logistic model on the pooled sample."""
    pooled = SubjectGroup.concat([dataset.reduced_concurrent, *dataset.historical])
    cols = covset_columns(covset, pooled.x.shape[1])
    X = np.column_stack([np.ones(len(pooled)), pooled.x[:, cols]])
    t = (pooled.trial == 0).astype(float)
    fit = fit_logistic(X, t)
    return PsFit(
        sample=pooled,
        ps=fit.fitted,
        logit_ps=X @ fit.coef,
        model_spec=covset,
        fit=fit,
    )


def match_nearest(
    psfit: PsFit,
    concurrent_ids: np.ndarray,
    historical_ids: np.ndarray,
    caliper_mult: float = DEFAULT_CALIPER_MULT,
    rng: np.random.Generator | None = None,
    caliper_units: str = "sd",
) -> MatchSet:
    """1:1 nearest-neighbor matching with replacement under a caliper.

    Every concurrent subject is matched to the historical candidate with
    the closest propensity score; pairs farther apart than the caliper
    (``caliper_mult`` times the pooled-score SD, or raw score units when
    ``caliper_units='raw'``) are discarded and the subject left
    unmatched. Distance ties go to the candidate drawn earliest in a
    seeded shuffle, which makes reruns reproducible.
    """
    if caliper_units not in ("sd", "raw"):
        raise ValueError("caliper_units must be 'sd' or 'raw'")
    if caliper_mult < 0:
        raise ValueError("caliper_mult must be non-negative")
    scale = float(np.std(psfit.ps, ddof=1)) if caliper_units == "sd" else 1.0
    caliper = caliper_mult * scale

    c_pos = psfit.positions(np.asarray(concurrent_ids))
    h_pos = psfit.positions(np.asarray(historical_ids))
    if h_pos.size == 0:
        return MatchSet(pairs=(), unmatched_concurrent=tuple(int(s) for s in concurrent_ids),
                        caliper=caliper)
    ps_c = psfit.ps[c_pos]
    ps_h = psfit.ps[h_pos]

    order = rng.permutation(h_pos.size) if rng is not None else np.arange(h_pos.size)
    sort_in_shuffled = np.argsort(ps_h[order], kind="stable")
    sorted_ps = ps_h[order][sort_in_shuffled]
    sorted_ids = np.asarray(historical_ids)[order][sort_in_shuffled]
    priority = sort_in_shuffled  # position in the shuffle; lower wins ties

    m = sorted_ps.size
    # first index of each run of equal scores; the run head has the best priority
    run_start = np.flatnonzero(np.r_[True, sorted_ps[1:] != sorted_ps[:-1]])
    first_of_run = run_start[np.searchsorted(run_start, np.arange(m), side="right") - 1]

    j = np.searchsorted(sorted_ps, ps_c)
    left = np.clip(j - 1, 0, m - 1)
    right = np.clip(j, 0, m - 1)
    dist_left = np.where(j > 0, np.abs(ps_c - sorted_ps[left]), np.inf)
    dist_right = np.where(j < m, np.abs(sorted_ps[right] - ps_c), np.inf)

    rep_left = first_of_run[left]
    rep_right = first_of_run[right]
    take_right = (dist_right < dist_left) | (
        (dist_right == dist_left) & (priority[rep_right] < priority[rep_left])
    )
    chosen = np.where(take_right, rep_right, rep_left)
    dist = np.where(take_right, dist_right, dist_left)

    pairs = []
    unmatched = []
    for cid, rep, d in zip(np.asarray(concurrent_ids), chosen, dist):
        if d <= caliper:
            pairs.append((int(cid), int(sorted_ids[rep])))
        else:
            unmatched.append(int(cid))
    return MatchSet(pairs=tuple(pairs), unmatched_concurrent=tuple(unmatched), caliper=caliper)


def ipw_weights(
    psfit: PsFit, bounds: tuple[float, float] = DEFAULT_WEIGHT_BOUNDS
) -> WeightSet:
    """Odds weights ps/(1-ps) for historical subjects, 1 for concurrent.

    Historical weights falling outside ``bounds`` are trimmed (set to
    zero and recorded), which drops score regions with essentially no
    concurrent support on either side.
    """
    lo, hi = bounds
    if not 0 < lo < hi:
        raise ValueError("weight bounds must satisfy 0 < lower < upper")
    conc = psfit.is_concurrent
    with np.errstate(divide="ignore", over="ignore"):
        odds = psfit.ps / (1.0 - psfit.ps)
    weights = np.where(conc, 1.0, odds)
    trimmed = ~conc & ((odds < lo) | (odds > hi) | ~np.isfinite(odds))
    weights[trimmed] = 0.0
    return WeightSet(
        weights=weights,
        trimmed_ids=tuple(int(s) for s in psfit.sample.ids[trimmed]),
        bounds=(lo, hi),
    )


def stratify(
    psfit: PsFit, n_strata: int = 5, concurrent_ids: np.ndarray | None = None
) -> np.ndarray:
    """Assign every pooled subject a stratum by concurrent-score quantiles.

    Cut points are the 1/n .. (n-1)/n quantiles of the concurrent
    subjects' scores, so concurrent subjects split evenly. Historical
    subjects outside the concurrent score range get label -1 (excluded).
    """
    if n_strata < 2:
        raise ValueError("need at least two strata")
    conc_mask = (
        psfit.is_concurrent
        if concurrent_ids is None
        else np.isin(np.arange(len(psfit.sample)), psfit.positions(np.asarray(concurrent_ids)))
    )
    conc_ps = psfit.ps[conc_mask]
    if np.unique(conc_ps).size < n_strata:
        raise ValueError(
            f"only {np.unique(conc_ps).size} distinct concurrent scores for {n_strata} strata"
        )
    cuts = np.quantile(conc_ps, np.arange(1, n_strata) / n_strata)
    labels = np.searchsorted(cuts, psfit.ps, side="left").astype(int)
    outside = ~conc_mask & ((psfit.ps < conc_ps.min()) | (psfit.ps > conc_ps.max()))
    labels[outside] = -1
    return labels


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


def _wald_estimate(
    method_id: str,
    covset: int | None,
    est: float,
    se: float,
    alpha: float,
    flags: tuple[str, ...] = (),
    diagnostics: dict | None = None,
) -> EffectEstimate:
    dec = wald_decision(est, se, alpha)
    half = float(ndtri(1.0 - alpha / 2.0)) * se
    return EffectEstimate(
        method_id=method_id,
        covset_id=covset,
        estimate=est,
        se=se,
        reject=dec.reject,
        interval=(est - half, est + half),
        var_for_essr=se * se,
        flags=flags,
        diagnostics=diagnostics or {},
    )


def unadjusted_effect(
    group: SubjectGroup, method_id: str, alpha: float = 0.05
) -> EffectEstimate:
    """Plain OLS of outcome on treatment within one trial, model-based SE."""
    X = np.column_stack([np.ones(len(group)), group.z.astype(float)])
    fit = fit_ols(X, group.y, design_info=("intercept", "treated"))
    se = float(np.sqrt(fit.cov_model[1, 1]))
    return _wald_estimate(method_id, None, float(fit.coef[1]), se, alpha)


def estimate_psm(
    dataset: TrialDataset,
    covset: int,
    psfit: PsFit | None = None,
    matchset: MatchSet | None = None,
    caliper_mult: float = DEFAULT_CALIPER_MULT,
    caliper_units: str = "sd",
    rng: np.random.Generator | None = None,
    alpha: float = 0.05,
) -> EffectEstimate:
    """Matching estimator: OLS on the concurrent trial plus matched controls.

    Matched historical subjects enter the control arm once per pair (so
    re-used controls appear as duplicated rows) and the treatment SE is
    cluster-robust with clusters given by the original subject id. With
    an empty match set the estimate falls back to the unadjusted
    reduced-concurrent fit, flagged.
    """
    if psfit is None:
        psfit = estimate_ps(dataset, covset)
    red = dataset.reduced_concurrent
    if matchset is None:
        hist = dataset.historical_all()
        matchset = match_nearest(
            psfit, red.ids, hist.ids, caliper_mult=caliper_mult,
            caliper_units=caliper_units, rng=rng,
        )
    if not matchset.pairs:
        est = unadjusted_effect(red, "PSM", alpha)
        est.covset_id = covset
        est.flags = ("psm:no_matches_concurrent_only",)
        return est

    matched_ids = np.array([h for _, h in matchset.pairs])
    pos = psfit.positions(matched_ids)
    y = np.concatenate([red.y, psfit.sample.y[pos]])
    z = np.concatenate([red.z.astype(float), np.zeros(matched_ids.size)])
    clusters = np.concatenate([red.ids, matched_ids])
    X = np.column_stack([np.ones(y.size), z])
    fit = fit_ols(X, y, design_info=("intercept", "treated"))
    se = sandwich_se(fit, 1, clusters=clusters)
    return _wald_estimate(
        "PSM", covset, float(fit.coef[1]), se, alpha,
        diagnostics={
            "n_pairs": float(len(matchset.pairs)),
            "n_unmatched": float(len(matchset.unmatched_concurrent)),
            "n_unique_matched": float(np.unique(matched_ids).size),
        },
    )


def estimate_psw(
    dataset: TrialDataset,
    covset: int,
    psfit: PsFit | None = None,
    weightset: WeightSet | None = None,
    bounds: tuple[float, float] = DEFAULT_WEIGHT_BOUNDS,
    alpha: float = 0.05,
) -> EffectEstimate:
    """Weighting estimator: WLS of outcome on treatment, robust SE.

    Concurrent subjects keep weight 1; retained historical controls get
    the trimmed odds weights. If trimming removes every historical
    subject the estimate falls back to the unadjusted reduced-concurrent
    fit, flagged.
    """
    if psfit is None:
        psfit = estimate_ps(dataset, covset)
    if weightset is None:
        weightset = ipw_weights(psfit, bounds=bounds)
    sample = psfit.sample
    keep = weightset.weights > 0
    hist_kept = int(np.sum(keep & ~psfit.is_concurrent))
    if hist_kept == 0:
        est = unadjusted_effect(dataset.reduced_concurrent, "PSW", alpha)
        est.covset_id = covset
        est.flags = ("psw:all_historical_trimmed_concurrent_only",)
        return est
    y = sample.y[keep]
    z = sample.z[keep].astype(float)
    w = weightset.weights[keep]
    X = np.column_stack([np.ones(y.size), z])
    fit = fit_ols(X, y, weights=w, design_info=("intercept", "treated"))
    se = sandwich_se(fit, 1)
    return _wald_estimate(
        "PSW", covset, float(fit.coef[1]), se, alpha,
        diagnostics={
            "n_hist_kept": float(hist_kept),
            "n_trimmed": float(len(weightset.trimmed_ids)),
            "hist_weight_sum": float(np.sum(weightset.weights[~psfit.is_concurrent])),
        },
    )
