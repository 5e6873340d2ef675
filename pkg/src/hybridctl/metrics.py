"""Per-replicate estimate records and operating-characteristic summaries.

Bias, rejection rate, and the effective sample size ratio (ESSR). The
primary ESSR is computed per replicate from the squared standard errors
of a method and of the unadjusted reduced-concurrent benchmark on the
same data, then averaged; an across-replicate empirical-variance
variant is reported alongside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "EffectEstimate",
    "SummaryRow",
    "SummaryAccumulator",
    "bias",
    "rel_bias_pct",
    "reject_rate",
    "essr",
    "summarize",
    "merge_accumulators",
]

UNADJ_RC_KEY = ("unadj.rc", None, "")


@dataclass
class EffectEstimate:
    """One method's result on one replicate.

    ``var_for_essr`` is the squared reported standard error used in the
    ESSR ratio; ``essr_pct`` is filled in by the harness once the
    replicate's no-borrowing benchmark is known. Failed evaluations keep
    a row (``failed=True``) with NaN numerics and an explanatory flag.
    """

    method_id: str
    covset_id: int | None
    estimate: float
    se: float
    reject: bool
    interval: tuple[float, float]
    var_for_essr: float
    hyperparam: str = ""
    flags: tuple[str, ...] = ()
    diagnostics: dict = field(default_factory=dict)
    essr_pct: float | None = None
    failed: bool = False

    @property
    def key(self) -> tuple[str, int | None, str]:
        return (self.method_id, self.covset_id, self.hyperparam)

    def with_labels(
        self, method_id: str | None = None, hyperparam: str | None = None
    ) -> "EffectEstimate":
        out = self
        if method_id is not None:
            out = replace(out, method_id=method_id)
        if hyperparam is not None:
            out = replace(out, hyperparam=hyperparam)
        return out


@dataclass(frozen=True)
class SummaryRow:
    scenario_id: str
    method_id: str
    covset_id: int | None
    hyperparam: str
    bias: float
    rel_bias_pct: float | None
    reject_rate: float
    mean_se: float
    essr_pct: float | None
    essr_empirical_pct: float | None
    n_used: int
    n_failed: int

    @property
    def key(self) -> tuple[str, int | None, str]:
        return (self.method_id, self.covset_id, self.hyperparam)


def bias(estimates: Iterable[float], theta_true: float) -> float:
    vals = [float(e) for e in estimates]
    if not vals:
        raise ValueError("need at least one estimate")
    return math.fsum(v - theta_true for v in vals) / len(vals)


def rel_bias_pct(bias_value: float, theta_true: float) -> float | None:
    """Relative bias in percent; undefined (None) when the true effect is zero."""
    if theta_true == 0:
        return None
    return 100.0 * bias_value / theta_true


def reject_rate(rejections: Iterable[bool]) -> float:
    flags = [bool(r) for r in rejections]
    if not flags:
        raise ValueError("need at least one decision")
    return sum(flags) / len(flags)


def essr(var_no_borrow: float, var_borrow: float) -> float:
    """Effective sample size ratio in percent: (var_nb / var_b - 1) * 100."""
    if not (var_no_borrow > 0 and var_borrow > 0):
        raise ValueError("variances must be positive")
    return (var_no_borrow / var_borrow - 1.0) * 100.0


def _empirical_var(vals: Sequence[float]) -> float | None:
    if len(vals) < 2:
        return None
    return float(np.var(np.asarray(vals), ddof=1))


def summarize(
    per_replicate: Sequence[Sequence[EffectEstimate]],
    theta_true: float,
    scenario_id: str,
) -> list[SummaryRow]:
    """Aggregate replicate-level rows into one summary row per method cell.

    Cells are keyed by (method_id, covset_id, hyperparam) and appear in
    first-seen order. Sums use ``math.fsum`` so the result does not
    depend on replicate ordering. The empirical ESSR compares
    across-replicate estimate variances against the unadjusted
    reduced-concurrent cell, each over its own non-failed replicates.
    """
    order: list[tuple] = []
    cells: dict[tuple, dict] = {}
    for rows in per_replicate:
        for est in rows:
            key = est.key
            if key not in cells:
                order.append(key)
                cells[key] = {"used": [], "failed": 0}
            if est.failed or not np.isfinite(est.estimate):
                cells[key]["failed"] += 1
            else:
                cells[key]["used"].append(est)

    rc_var = None
    if UNADJ_RC_KEY in cells:
        rc_var = _empirical_var([e.estimate for e in cells[UNADJ_RC_KEY]["used"]])

    out = []
    for key in order:
        used = cells[key]["used"]
        n_failed = cells[key]["failed"]
        if not used:
            out.append(
                SummaryRow(
                    scenario_id=scenario_id,
                    method_id=key[0],
                    covset_id=key[1],
                    hyperparam=key[2],
                    bias=float("nan"),
                    rel_bias_pct=None,
                    reject_rate=float("nan"),
                    mean_se=float("nan"),
                    essr_pct=None,
                    essr_empirical_pct=None,
                    n_used=0,
                    n_failed=n_failed,
                )
            )
            continue
        b = bias([e.estimate for e in used], theta_true)
        essr_vals = [e.essr_pct for e in used if e.essr_pct is not None]
        own_var = _empirical_var([e.estimate for e in used])
        emp = None
        if rc_var is not None and own_var is not None and own_var > 0:
            emp = (rc_var / own_var - 1.0) * 100.0
        out.append(
            SummaryRow(
                scenario_id=scenario_id,
                method_id=key[0],
                covset_id=key[1],
                hyperparam=key[2],
                bias=b,
                rel_bias_pct=rel_bias_pct(b, theta_true),
                reject_rate=reject_rate([e.reject for e in used]),
                mean_se=math.fsum(e.se for e in used) / len(used),
                essr_pct=(math.fsum(essr_vals) / len(essr_vals)) if essr_vals else None,
                essr_empirical_pct=emp,
                n_used=len(used),
                n_failed=n_failed,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Mergeable partial summaries (for splitting work across workers)
# ---------------------------------------------------------------------------


class SummaryAccumulator:
    """Mergeable running sums equivalent to :func:`summarize`.

    Partial accumulators built on disjoint replicate subsets can be
    merged; finalizing then reproduces the one-shot summary up to float
    round-off in the sums.
    """

    _FIELDS = ("n_used", "n_failed", "s_est", "s_est2", "s_se", "n_reject", "s_essr", "n_essr")

    def __init__(self) -> None:
        self.order: list[tuple] = []
        self.cells: dict[tuple, dict] = {}

    def _cell(self, key: tuple) -> dict:
        if key not in self.cells:
            self.order.append(key)
            self.cells[key] = {f: 0 for f in self._FIELDS}
        return self.cells[key]

    def add_replicate(self, rows: Sequence[EffectEstimate]) -> None:
        for est in rows:
            cell = self._cell(est.key)
            if est.failed or not np.isfinite(est.estimate):
                cell["n_failed"] += 1
                continue
            cell["n_used"] += 1
            cell["s_est"] += est.estimate
            cell["s_est2"] += est.estimate * est.estimate
            cell["s_se"] += est.se
            cell["n_reject"] += bool(est.reject)
            if est.essr_pct is not None:
                cell["s_essr"] += est.essr_pct
                cell["n_essr"] += 1

    def merge(self, other: "SummaryAccumulator") -> "SummaryAccumulator":
        out = SummaryAccumulator()
        for acc in (self, other):
            for key in acc.order:
                cell = out._cell(key)
                for f in self._FIELDS:
                    cell[f] += acc.cells[key][f]
        return out

    @staticmethod
    def _var(n: int, s: float, s2: float) -> float | None:
        if n < 2:
            return None
        return max(s2 - s * s / n, 0.0) / (n - 1)

    def finalize(self, theta_true: float, scenario_id: str) -> list[SummaryRow]:
        rc_var = None
        if UNADJ_RC_KEY in self.cells:
            c = self.cells[UNADJ_RC_KEY]
            rc_var = self._var(c["n_used"], c["s_est"], c["s_est2"])
        out = []
        for key in self.order:
            c = self.cells[key]
            n = c["n_used"]
            if n == 0:
                out.append(
                    SummaryRow(scenario_id, key[0], key[1], key[2], float("nan"), None,
                               float("nan"), float("nan"), None, None, 0, c["n_failed"]))
                continue
            b = c["s_est"] / n - theta_true
            own_var = self._var(n, c["s_est"], c["s_est2"])
            emp = None
            if rc_var is not None and own_var is not None and own_var > 0:
                emp = (rc_var / own_var - 1.0) * 100.0
            out.append(
                SummaryRow(
                    scenario_id=scenario_id,
                    method_id=key[0],
                    covset_id=key[1],
                    hyperparam=key[2],
                    bias=b,
                    rel_bias_pct=rel_bias_pct(b, theta_true),
                    reject_rate=c["n_reject"] / n,
                    mean_se=c["s_se"] / n,
                    essr_pct=(c["s_essr"] / c["n_essr"]) if c["n_essr"] else None,
                    essr_empirical_pct=emp,
                    n_used=n,
                    n_failed=c["n_failed"],
                )
            )
        return out


def merge_accumulators(parts: Iterable[SummaryAccumulator]) -> SummaryAccumulator:
    merged = SummaryAccumulator()
    for part in parts:
        merged = merged.merge(part)
    return merged
