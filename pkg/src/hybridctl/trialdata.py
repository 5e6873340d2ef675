"""Subject-level data for hybrid controlled trials.

A replicate starts from ``n`` subjects with six independent standard
normal covariates. Trial membership (one concurrent randomized trial
plus one or three historical control pools) follows a logistic or
multinomial-logit selection model on the covariates, the concurrent
trial is randomized 1:1 by exact permutation, and outcomes follow a
linear model with an additive treatment effect and unit-variance noise.
The reduced (2:1) concurrent design drops a uniform random half of the
concurrent controls; the dropped information is what borrowing methods
try to recover from the historical pools.

Also provides small utilities for building case-study style datasets
from an existing outcome vector (a correlated synthetic covariate and a
propensity-biased subsampler) and a CSV ingestion path for external
subject-level data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

N_COVARIATES = 6

__all__ = [
    "N_COVARIATES",
    "SubjectRecord",
    "SubjectGroup",
    "TrialDataset",
    "GenCoefficients",
    "PRESETS",
    "preset",
    "preset_n_total",
    "gen_covariates",
    "trial_probabilities_single",
    "trial_probabilities_multi",
    "assign_trials_single",
    "assign_trials_multi",
    "gen_outcomes",
    "build_replicate",
    "make_correlated_covariate",
    "ps_biased_split",
    "load_subjects_csv",
]


# ---------------------------------------------------------------------------
# Core containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubjectRecord:
    """Single-subject view of one :class:`SubjectGroup` row."""

    id: int
    x: np.ndarray
    z: int
    trial: int
    y: float


@dataclass(frozen=True)
class SubjectGroup:
    """Column-oriented collection of subjects.

    Attributes
    ----------
    ids : (n,) int array of globally unique subject ids.
    x : (n, p) float array of covariates.
    z : (n,) int array, 1 = treated, 0 = control.
    trial : (n,) int array, 0 = concurrent, 1..k = historical pool.
    y : (n,) float array of outcomes.
    """

    ids: np.ndarray
    x: np.ndarray
    z: np.ndarray
    trial: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        n = self.ids.shape[0]
        if self.x.ndim != 2 or self.x.shape[0] != n:
            raise ValueError("covariate matrix does not match subject count")
        for name in ("z", "trial", "y"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"column '{name}' does not match subject count")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def record(self, i: int) -> SubjectRecord:
        return SubjectRecord(
            id=int(self.ids[i]),
            x=self.x[i].copy(),
            z=int(self.z[i]),
            trial=int(self.trial[i]),
            y=float(self.y[i]),
        )

    def take(self, index: np.ndarray) -> "SubjectGroup":
        return SubjectGroup(
            ids=self.ids[index],
            x=self.x[index],
            z=self.z[index],
            trial=self.trial[index],
            y=self.y[index],
        )

    @property
    def treated_mask(self) -> np.ndarray:
        return self.z == 1

    def treated(self) -> "SubjectGroup":
        return self.take(np.flatnonzero(self.treated_mask))

    def controls(self) -> "SubjectGroup":
        return self.take(np.flatnonzero(~self.treated_mask))

    @staticmethod
    def concat(groups: "list[SubjectGroup] | tuple[SubjectGroup, ...]") -> "SubjectGroup":
        if not groups:
            raise ValueError("cannot concatenate zero subject groups")
        return SubjectGroup(
            ids=np.concatenate([g.ids for g in groups]),
            x=np.vstack([g.x for g in groups]),
            z=np.concatenate([g.z for g in groups]),
            trial=np.concatenate([g.trial for g in groups]),
            y=np.concatenate([g.y for g in groups]),
        )


@dataclass(frozen=True)
class TrialDataset:
    """One replicate partitioned the way the estimators consume it.

    ``full_concurrent`` is the 1:1 randomized concurrent trial,
    ``reduced_concurrent`` the same trial after dropping half of its
    controls (the 2:1 hybrid design), and ``historical`` the k control
    pools (all subjects untreated).
    """

    full_concurrent: SubjectGroup
    reduced_concurrent: SubjectGroup
    historical: tuple[SubjectGroup, ...]

    def __post_init__(self) -> None:
        if len(self.historical) == 0:
            raise ValueError("dataset needs at least one historical pool")
        for j, pool in enumerate(self.historical, start=1):
            if len(pool) and not np.all(pool.z == 0):
                raise ValueError(f"historical pool {j} contains treated subjects")

    @property
    def k_historical(self) -> int:
        return len(self.historical)

    def historical_all(self) -> SubjectGroup:
        return SubjectGroup.concat(list(self.historical))


# ---------------------------------------------------------------------------
# Generating coefficients and presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenCoefficients:
    """Coefficients of the outcome and trial-membership models.

    ``beta0``/``beta`` are the selection-model coefficients: a scalar and
    a (6,) vector for the single historical pool (logistic model of
    being historical), or a (k,) vector and (k, 6) matrix for k pools
    (multinomial-logit relative to the concurrent trial).
    """

    alpha0: float
    alpha: np.ndarray
    theta_treat: float
    beta0: float | np.ndarray
    beta: np.ndarray
    sigma_e: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        if np.ndim(self.beta0) > 0:
            object.__setattr__(self, "beta0", np.asarray(self.beta0, dtype=float))
        if self.alpha.shape != (N_COVARIATES,):
            raise ValueError("alpha must have one entry per covariate")
        if self.sigma_e < 0:
            raise ValueError("sigma_e must be non-negative")
        k = self.k_historical
        if k == 1:
            if self.beta.shape != (N_COVARIATES,):
                raise ValueError("beta must be a 6-vector when beta0 is scalar")
        else:
            if self.beta.shape != (k, N_COVARIATES):
                raise ValueError("beta must be (k, 6) when beta0 is a k-vector")

    @property
    def k_historical(self) -> int:
        return 1 if np.ndim(self.beta0) == 0 else int(np.shape(self.beta0)[0])

    def with_theta(self, theta: float) -> "GenCoefficients":
        return replace(self, theta_treat=float(theta))


PRESETS: dict[str, GenCoefficients] = {
    # Single historical pool, moderate covariate imbalance.
    "single-moderate": GenCoefficients(
        alpha0=1.0,
        alpha=np.full(N_COVARIATES, 0.2),
        theta_treat=0.35,
        beta0=-0.78,
        beta=np.full(N_COVARIATES, 0.3),
    ),
    # Single historical pool, severe covariate imbalance.
    "single-severe": GenCoefficients(
        alpha0=1.0,
        alpha=np.full(N_COVARIATES, 0.5),
        theta_treat=0.5,
        beta0=-0.9,
        beta=np.full(N_COVARIATES, 0.5),
    ),
    # Three historical pools, moderate between-trial heterogeneity.
    "multi-moderate": GenCoefficients(
        alpha0=1.2,
        alpha=np.full(N_COVARIATES, 0.5),
        theta_treat=0.5,
        beta0=np.array([0.8, -1.0, -0.7]),
        beta=np.array(
            [
                np.full(N_COVARIATES, 0.1),
                np.full(N_COVARIATES, 0.0),
                np.full(N_COVARIATES, -0.1),
            ]
        ),
    ),
    # Three historical pools, severe between-trial heterogeneity.
    "multi-severe": GenCoefficients(
        alpha0=1.0,
        alpha=np.full(N_COVARIATES, 0.5),
        theta_treat=0.5,
        beta0=np.array([-1.0, -0.1, 0.2]),
        beta=np.array(
            [
                np.full(N_COVARIATES, 0.1),
                np.full(N_COVARIATES, 0.4),
                np.full(N_COVARIATES, -0.2),
            ]
        ),
    ),
}


def preset(name: str) -> GenCoefficients:
    try:
        return PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise KeyError(f"unknown preset '{name}' (known presets: {known})") from None


def preset_n_total(name: str) -> int:
    """Default total subject count paired with a preset."""
    return 1200 if preset(name).k_historical == 1 else 1600


# ---------------------------------------------------------------------------
# Generation steps
# ---------------------------------------------------------------------------


def gen_covariates(n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw an (n, 6) matrix of independent standard normal covariates."""
    if n < 1:
        raise ValueError("need at least one subject")
    return rng.standard_normal((n, N_COVARIATES))


def trial_probabilities_single(X: np.ndarray, beta0: float, beta: np.ndarray) -> np.ndarray:
    """P(concurrent) under the logistic membership model, one value per row."""
    lin = beta0 + X @ np.asarray(beta, dtype=float)
    # expit computed stably in both tails
    out = np.empty_like(lin)
    pos = lin >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-lin[pos]))
    enl = np.exp(lin[~pos])
    out[~pos] = enl / (1.0 + enl)
    return out


def trial_probabilities_multi(
    X: np.ndarray, beta0: np.ndarray, beta: np.ndarray
) -> np.ndarray:
    """Membership probabilities (n, k+1); column 0 is the concurrent trial.

    Each historical pool j gets odds exp(beta0_j + beta_j . x) relative
    to the concurrent trial, so p_concurrent = 1 / (1 + sum_j exp(...)).
    """
    lin = np.asarray(beta0, dtype=float)[None, :] + X @ np.asarray(beta, dtype=float).T
    # subtract the rowwise max (including the implicit 0 for concurrent)
    top = np.maximum(lin.max(axis=1), 0.0)
    num = np.exp(lin - top[:, None])
    base = np.exp(-top)
    denom = base + num.sum(axis=1)
    probs = np.empty((X.shape[0], lin.shape[1] + 1))
    probs[:, 0] = base / denom
    probs[:, 1:] = num / denom[:, None]
    return probs


def assign_trials_single(
    X: np.ndarray, beta0: float, beta: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Sample trial labels (0 concurrent, 1 historical) for each subject."""
    p_conc = trial_probabilities_single(X, beta0, beta)
    return np.where(rng.random(X.shape[0]) < p_conc, 0, 1)


def assign_trials_multi(
    X: np.ndarray, beta0: np.ndarray, beta: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Sample trial labels 0..k from the multinomial-logit model."""
    probs = trial_probabilities_multi(X, beta0, beta)
    cum = np.cumsum(probs, axis=1)
    u = rng.random(X.shape[0])
    labels = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(labels, probs.shape[1] - 1)


def gen_outcomes(
    X: np.ndarray, z: np.ndarray, coeffs: GenCoefficients, rng: np.random.Generator
) -> np.ndarray:
    """Linear outcomes y = alpha0 + theta z + x . alpha + e, e ~ N(0, sigma_e^2)."""
    if X.shape[0] != z.shape[0]:
        raise ValueError("covariates and treatment vector disagree on n")
    noise = coeffs.sigma_e * rng.standard_normal(X.shape[0])
    return coeffs.alpha0 + coeffs.theta_treat * z + X @ coeffs.alpha + noise


def build_replicate(
    coeffs: GenCoefficients, n_total: int, rng: np.random.Generator
) -> TrialDataset:
    """Generate one full replicate.

    Steps, in fixed RNG order: draw covariates, assign trial labels,
    randomize the concurrent trial 1:1 by exact permutation (odd counts
    give one extra treated subject), draw outcomes, then drop a uniform
    half of the concurrent controls to form the reduced design.
    Historical subjects are always untreated.
    """
    k = coeffs.k_historical
    if k not in (1, 3):
        raise ValueError(f"unsupported number of historical pools: {k} (expected 1 or 3)")
    X = gen_covariates(n_total, rng)
    if k == 1:
        labels = assign_trials_single(X, float(coeffs.beta0), coeffs.beta, rng)
    else:
        labels = assign_trials_multi(X, coeffs.beta0, coeffs.beta, rng)

    conc_idx = np.flatnonzero(labels == 0)
    n_conc = conc_idx.size
    if n_conc < 4 or n_conc > n_total - 2:
        raise ValueError(
            f"degenerate replicate: {n_conc} concurrent subjects out of {n_total}"
        )
    z = np.zeros(n_total, dtype=int)
    n_treat = (n_conc + 1) // 2
    perm = rng.permutation(conc_idx)
    z[perm[:n_treat]] = 1

    y = gen_outcomes(X, z, coeffs, rng)
    ids = np.arange(n_total)
    everyone = SubjectGroup(ids=ids, x=X, z=z, trial=labels, y=y)

    full_concurrent = everyone.take(conc_idx)
    ctrl_idx = conc_idx[z[conc_idx] == 0]
    m = ctrl_idx.size
    kept = np.sort(rng.choice(ctrl_idx, size=m // 2, replace=False))
    reduced_idx = np.sort(np.concatenate([conc_idx[z[conc_idx] == 1], kept]))
    reduced_concurrent = everyone.take(reduced_idx)

    pools = tuple(everyone.take(np.flatnonzero(labels == j)) for j in range(1, k + 1))
    return TrialDataset(
        full_concurrent=full_concurrent,
        reduced_concurrent=reduced_concurrent,
        historical=pools,
    )


# ---------------------------------------------------------------------------
# Case-study style utilities
# ---------------------------------------------------------------------------


def make_correlated_covariate(
    y: np.ndarray, rho: float, rng: np.random.Generator
) -> np.ndarray:
    """Synthesize a covariate with target correlation ``rho`` to ``y``.

    Returns rho * standardize(y) + sqrt(1 - rho^2) * w with w standard
    normal, so the population correlation with y is exactly rho.
    """
    y = np.asarray(y, dtype=float)
    if y.size < 3:
        raise ValueError("need at least three observations")
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must lie strictly inside (-1, 1)")
    sd = y.std(ddof=1)
    if sd == 0:
        raise ValueError("outcome vector has zero variance")
    ystd = (y - y.mean()) / sd
    return rho * ystd + np.sqrt(1.0 - rho * rho) * rng.standard_normal(y.size)


def ps_biased_split(
    ps: np.ndarray,
    n_target: int,
    rng: np.random.Generator,
    p_hi: float = 0.65,
    p_lo: float = 0.35,
) -> np.ndarray:
    """Select ``n_target`` subjects with acceptance biased by propensity score.

    Subjects are visited in a shuffled order; each is accepted with
    probability ``p_hi`` when its score is above the mean score and
    ``p_lo`` otherwise, cycling through the remaining subjects until
    exactly ``n_target`` are accepted. Returns a boolean selection mask.
    """
    ps = np.asarray(ps, dtype=float)
    n = ps.size
    if not 0 < n_target < n:
        raise ValueError("n_target must be strictly between 0 and len(ps)")
    for p, name in ((p_hi, "p_hi"), (p_lo, "p_lo")):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be a probability")
    cutoff = ps.mean()
    accept_p = np.where(ps > cutoff, p_hi, p_lo)
    if np.all(accept_p == 0):
        raise ValueError("acceptance probabilities are identically zero")
    order = rng.permutation(n)
    selected = np.zeros(n, dtype=bool)
    n_selected = 0
    while n_selected < n_target:
        progressed = False
        for i in order:
            if selected[i]:
                continue
            if rng.random() < accept_p[i]:
                selected[i] = True
                n_selected += 1
                progressed = True
                if n_selected == n_target:
                    break
        if not progressed and not np.any(accept_p[~selected] > 0):
            raise ValueError("remaining subjects all have zero acceptance probability")
    return selected


# ---------------------------------------------------------------------------
# External data ingestion
# ---------------------------------------------------------------------------


def load_subjects_csv(path: str) -> TrialDataset:
    """Read subject-level data from a CSV file.

    Expected columns: ``trial`` (0 = concurrent, 1..k = historical pool),
    ``z`` (0/1; must be 0 for historical subjects), ``y``, covariates
    ``x1..xp`` (p >= 1, consecutively numbered), and optionally ``id``.
    The concurrent trial is analyzed as-is, so the full and reduced
    designs coincide for external data.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        cols = list(reader.fieldnames)
        for required in ("trial", "z", "y"):
            if required not in cols:
                raise ValueError(f"{path}: missing required column '{required}'")
        xcols = []
        while f"x{len(xcols) + 1}" in cols:
            xcols.append(f"x{len(xcols) + 1}")
        if not xcols:
            raise ValueError(f"{path}: no covariate columns x1..xp found")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no subject rows")

    n = len(rows)
    ids = np.array(
        [int(r["id"]) if "id" in cols and r["id"] != "" else i for i, r in enumerate(rows)]
    )
    if np.unique(ids).size != n:
        raise ValueError(f"{path}: subject ids are not unique")
    trial = np.array([int(r["trial"]) for r in rows])
    z = np.array([int(r["z"]) for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    x = np.array([[float(r[c]) for c in xcols] for r in rows])

    if np.any((z != 0) & (z != 1)):
        raise ValueError(f"{path}: column 'z' must be 0/1")
    k = int(trial.max())
    if trial.min() < 0 or k < 1:
        raise ValueError(f"{path}: need trial labels 0 (concurrent) and 1..k (historical)")
    everyone = SubjectGroup(ids=ids, x=x, z=z, trial=trial, y=y)
    conc = everyone.take(np.flatnonzero(trial == 0))
    if len(conc) == 0 or not (np.any(conc.z == 1) and np.any(conc.z == 0)):
        raise ValueError(f"{path}: concurrent trial needs both treated and control subjects")
    pools = []
    for j in range(1, k + 1):
        pool = everyone.take(np.flatnonzero(trial == j))
        if len(pool) == 0:
            raise ValueError(f"{path}: historical pool {j} is empty")
        pools.append(pool)
    return TrialDataset(
        full_concurrent=conc, reduced_concurrent=conc, historical=tuple(pools)
    )
