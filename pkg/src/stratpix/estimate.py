"""Aggregation estimators and their exact variance analysis.

The target quantity is the lattice mean H = (1/N) sum_p h(p). Because
sampling is with replacement from finite uniform populations, every
estimator moment has a closed form computable by enumeration:

  naive (ns)            Var = sigma^2 / n
  stratified (sg)       Var = sum_m w_m^2 sigma_m^2 / n_m
  antithetic (sag)      Var = sum_m w_m^2 (k_m v_m + u_m sigma_m^2) / n_m^2

with k_m = floor(n_m / 2) antithetic pairs, u_m = n_m mod 2 leftover
draws, and v_m = Var[h(P) + h(reflect(P))] for P uniform on stratum m.

Under exact proportional allocation (n_m = n w_m) the stratified form
collapses to sum_m w_m sigma_m^2 / n and the naive-minus-stratified gap
equals the weighted between-group spread sum_m w_m (mu_m - mu)^2 / n.
The report carries both the general form and the proportional collapse,
and both the weighted gap and its unweighted variant for comparison.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput
from .ioutil import atomic_write_text
from .lattice import PixelLattice, Stratification
from .rng import TrialStream, uniforms_to_indices
from .sampling import Allocation, SampleSet, allocate_proportional, draws_per_trial

EMPTY_STRATA_MODES = ("error", "exact")


@dataclass
class PixelFunction:
    """A pixel-indexed scalar field h, materialized as a flat array."""

    values: np.ndarray
    name: str = "h"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()

    def __call__(self, pixels) -> np.ndarray:
        return self.values[np.asarray(pixels, dtype=np.int64)]

    @classmethod
    def from_callable(cls, lattice: PixelLattice, fn, name: str = "h") -> "PixelFunction":
        return cls(np.array([float(fn(p)) for p in range(lattice.size)]), name=name)

    @classmethod
    def from_payload(cls, lattice: PixelLattice, column: int = 0) -> "PixelFunction":
        if lattice.payload is None:
            raise InvalidInput("lattice has no payload")
        if not 0 <= column < lattice.payload.shape[1]:
            raise InvalidInput(f"payload column {column} out of range")
        return cls(lattice.payload[:, column], name=f"payload_{column}")


def aggregate_exact(lattice: PixelLattice, fn: PixelFunction) -> float:
    """Exact lattice mean of h via compensated (exact) summation."""
    values = fn.values
    if values.size != lattice.size:
        raise InvalidInput("pixel function length does not match lattice")
    return math.fsum(values) / lattice.size


def estimate(sample_set: SampleSet, fn: PixelFunction,
             stratification: Stratification | None = None,
             empty_strata: str = "error") -> float:
    """Evaluate the estimator an existing sample set encodes.

    ns averages all drawn pixels. sg/sag average within each sampled
    stratum and combine with the population weights w_m. Strata absent
    from the sample either raise (``empty_strata="error"``) or, in
    ``"exact"`` mode, contribute their exact population mean times w_m,
    which keeps the estimator unbiased under zero allocations.
    """
    if empty_strata not in EMPTY_STRATA_MODES:
        raise InvalidInput(f"empty_strata must be one of {EMPTY_STRATA_MODES}")
    if not sample_set.groups:
        raise InvalidInput("sample set is empty")

    if sample_set.sampler == "ns":
        return float(np.mean(fn(sample_set.all_pixels())))

    if stratification is None:
        raise InvalidInput("stratified estimates require the stratification")
    sampled = {g.stratum for g in sample_set.groups}
    missing = [s for s in stratification.strata if s.id not in sampled]
    if missing and empty_strata == "error":
        raise InvalidInput(f"strata {[s.id for s in missing]} have no samples")

    weights = stratification.weights
    result = 0.0
    for group in sample_set.groups:
        result += float(weights[group.stratum]) * float(np.mean(fn(group.pixels)))
    for stratum in missing:
        result += float(weights[stratum.id]) * float(np.mean(fn(stratum.pixels)))
    return result


@dataclass
class StratumStats:
    """Exact per-stratum moments of h, including antithetic pair terms."""

    id: int
    class_id: int | None
    size: int
    weight: float
    n_alloc: int
    mu: float
    sigma2: float
    mean_reflect: float
    v_pair: float
    cov_reflect: float
    exact_fraction: float
    snapped: bool


def stratum_stats(stratification: Stratification, fn: PixelFunction,
                  allocation: Allocation | None = None) -> list[StratumStats]:
    counts = allocation.counts if allocation is not None else [0] * len(stratification)
    stats = []
    for stratum, w, n_m in zip(stratification.strata, stratification.weights, counts):
        vals = fn(stratum.pixels)
        rvals = vals[stratum.reflection_positions]
        mu = float(np.mean(vals))
        mean_r = float(np.mean(rvals))
        exact_fraction = float(np.mean(stratum.reflection_exact))
        stats.append(StratumStats(
            id=stratum.id,
            class_id=stratum.class_id,
            size=stratum.size,
            weight=float(w),
            n_alloc=int(n_m),
            mu=mu,
            sigma2=float(np.var(vals)),
            mean_reflect=mean_r,
            v_pair=float(np.var(vals + rvals)),
            cov_reflect=float(np.mean(vals * rvals)) - mu * mean_r,
            exact_fraction=exact_fraction,
            snapped=exact_fraction < 1.0,
        ))
    return stats


def analytic_variance(stratification: Stratification, fn: PixelFunction,
                      allocation: Allocation, sampler: str) -> float:
    """Closed-form estimator variance by exact enumeration.

    Zero-allocation strata contribute no variance (their exact means are
    supplied deterministically in the matching estimate mode).
    """
    n = allocation.n
    if sampler == "ns":
        return float(np.var(fn.values)) / n
    stats = stratum_stats(stratification, fn, allocation)
    if sampler == "sg":
        return sum(s.weight ** 2 * s.sigma2 / s.n_alloc for s in stats if s.n_alloc)
    if sampler == "sag":
        total = 0.0
        for s in stats:
            if s.n_alloc == 0:
                continue
            k, u = divmod(s.n_alloc, 2)
            total += s.weight ** 2 * (k * s.v_pair + u * s.sigma2) / s.n_alloc ** 2
        return total
    raise InvalidInput(f"unknown sampler {sampler!r}")


def analytic_mean(stratification: Stratification, fn: PixelFunction,
                  allocation: Allocation, sampler: str) -> float:
    """Exact estimator expectation (SAG can be biased on snapped strata)."""
    mu = aggregate_exact(stratification.lattice, fn)
    if sampler in ("ns", "sg"):
        return mu
    if sampler != "sag":
        raise InvalidInput(f"unknown sampler {sampler!r}")
    stats = stratum_stats(stratification, fn, allocation)
    total = 0.0
    for s in stats:
        if s.n_alloc == 0:
            total += s.weight * s.mu
            continue
        k, u = divmod(s.n_alloc, 2)
        total += s.weight * (k * (s.mu + s.mean_reflect) + u * s.mu) / s.n_alloc
    return total


@dataclass
class VarianceReport:
    """Analytic (and optionally Monte Carlo) comparison of the samplers."""

    scheme: str
    n: int
    num_strata: int
    mean_exact: float
    sigma2: float
    var_ns: float
    var_sg: float
    var_sg_proportional: float
    var_sag: float
    gap_weighted: float
    gap_unweighted: float
    theorem_residual: float
    proportional_exact: bool
    total_variance_residual: float
    mean_sag: float
    sag_bias: float
    lemma_ratio: float
    any_snapped: bool
    oversampled: bool = False  # n exceeds the pixel population (with-replacement)
    strata: list[StratumStats] = field(default_factory=list)
    mc: dict | None = None

    def analytic_for(self, sampler: str) -> tuple[float, float]:
        mean = self.mean_sag if sampler == "sag" else self.mean_exact
        var = {"ns": self.var_ns, "sg": self.var_sg, "sag": self.var_sag}[sampler]
        return mean, var

    def to_json_obj(self):
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return None
            return x

        return {
            "scheme": self.scheme,
            "n": self.n,
            "num_strata": self.num_strata,
            "mean_exact": self.mean_exact,
            "sigma2": self.sigma2,
            "var_ns": self.var_ns,
            "var_sg": self.var_sg,
            "var_sg_proportional": self.var_sg_proportional,
            "var_sag": self.var_sag,
            "gap_weighted": self.gap_weighted,
            "gap_unweighted": self.gap_unweighted,
            "theorem_residual": self.theorem_residual,
            "proportional_exact": self.proportional_exact,
            "total_variance_residual": self.total_variance_residual,
            "mean_sag": self.mean_sag,
            "sag_bias": self.sag_bias,
            "lemma_ratio": clean(self.lemma_ratio),
            "any_snapped": self.any_snapped,
            "oversampled": self.oversampled,
            "strata": [
                {
                    "id": s.id, "class_id": s.class_id, "size": s.size,
                    "weight": s.weight, "n_alloc": s.n_alloc, "mu": s.mu,
                    "sigma2": s.sigma2, "mean_reflect": s.mean_reflect,
                    "v_pair": s.v_pair, "cov_reflect": s.cov_reflect,
                    "exact_fraction": s.exact_fraction, "snapped": s.snapped,
                }
                for s in self.strata
            ],
            "mc": self.mc,
        }

    @classmethod
    def from_json_obj(cls, obj) -> "VarianceReport":
        strata = [StratumStats(**s) for s in obj.get("strata", [])]
        fields = {k: v for k, v in obj.items() if k != "strata"}
        if fields.get("lemma_ratio") is None:
            fields["lemma_ratio"] = math.inf
        return cls(strata=strata, **fields)


def build_variance_report(stratification: Stratification, fn: PixelFunction,
                          allocation: Allocation) -> VarianceReport:
    lattice = stratification.lattice
    if (allocation.counts == 0).any():
        raise InvalidInput("variance report needs every stratum sampled")
    n = allocation.n
    mean_exact = aggregate_exact(lattice, fn)
    sigma2 = float(np.var(fn.values))
    stats = stratum_stats(stratification, fn, allocation)

    var_ns = sigma2 / n
    var_sg = sum(s.weight ** 2 * s.sigma2 / s.n_alloc for s in stats)
    var_sg_prop = sum(s.weight * s.sigma2 for s in stats) / n
    var_sag = sum(
        s.weight ** 2 * ((s.n_alloc // 2) * s.v_pair + (s.n_alloc % 2) * s.sigma2)
        / s.n_alloc ** 2
        for s in stats
    )

    gap_w = sum(s.weight * (s.mu - mean_exact) ** 2 for s in stats) / n
    gap_u = sum((s.mu - mean_exact) ** 2 for s in stats) / n

    within = sum(s.weight * s.sigma2 for s in stats)
    between = sum(s.weight * (s.mu - mean_exact) ** 2 for s in stats)
    denom = sigma2 if sigma2 > 0 else 1.0
    tv_residual = abs(sigma2 - (within + between)) / denom

    total = lattice.size
    prop_exact = all(
        (n * s.size) % total == 0 and s.n_alloc * total == n * s.size for s in stats
    )

    mean_sag = 0.0
    for s in stats:
        k, u = divmod(s.n_alloc, 2)
        mean_sag += s.weight * (k * (s.mu + s.mean_reflect) + u * s.mu) / s.n_alloc

    if var_sg > 0:
        ratio = var_sag / (2.0 * var_sg)
    else:
        ratio = 0.0 if var_sag == 0 else math.inf

    return VarianceReport(
        scheme=stratification.scheme,
        n=n,
        num_strata=len(stratification),
        mean_exact=mean_exact,
        sigma2=sigma2,
        var_ns=var_ns,
        var_sg=float(var_sg),
        var_sg_proportional=float(var_sg_prop),
        var_sag=float(var_sag),
        gap_weighted=float(gap_w),
        gap_unweighted=float(gap_u),
        theorem_residual=float((var_ns - var_sg) - gap_w),
        proportional_exact=prop_exact,
        total_variance_residual=float(tv_residual),
        mean_sag=float(mean_sag),
        sag_bias=float(mean_sag - mean_exact),
        lemma_ratio=float(ratio),
        any_snapped=any(s.snapped for s in stats),
        oversampled=n > total,
        strata=stats,
    )


def save_report(report: VarianceReport, json_path) -> tuple[Path, Path]:
    """Write the report as JSON (full detail) and flat CSV (row per sampler)."""
    json_path = Path(json_path)
    csv_path = json_path.with_suffix(".csv")
    atomic_write_text(json_path, json.dumps(report.to_json_obj(), sort_keys=True, indent=2) + "\n")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sampler", "analytic_mean", "analytic_var", "mc_mean", "mc_var", "trials"])
    for sampler in ("ns", "sg", "sag"):
        mean, var = report.analytic_for(sampler)
        row = [sampler, repr(mean), repr(var)]
        if report.mc and sampler in report.mc.get("samplers", {}):
            entry = report.mc["samplers"][sampler]
            row += [repr(entry["mean"]), repr(entry["var"]), str(report.mc["trials"])]
        else:
            row += ["", "", ""]
        writer.writerow(row)
    atomic_write_text(csv_path, buf.getvalue())
    return json_path, csv_path


def load_report(json_path) -> VarianceReport:
    return VarianceReport.from_json_obj(json.loads(Path(json_path).read_text()))


@dataclass
class MonteCarloResult:
    """Per-trial estimates for each sampler, plus the configuration."""

    trials: int
    seed: int
    estimates: dict[str, np.ndarray]

    def mean(self, sampler: str) -> float:
        return math.fsum(self.estimates[sampler]) / self.trials

    def variance(self, sampler: str, ddof: int = 1) -> float:
        return float(np.var(self.estimates[sampler], ddof=ddof))


def mc_estimates(lattice: PixelLattice, stratification: Stratification | None,
                 fn: PixelFunction, allocation: Allocation,
                 trials: int, seed: int,
                 samplers=("ns", "sg", "sag"), chunk: int = 1024,
                 trial_start: int = 0) -> MonteCarloResult:
    """Per-trial estimates for each sampler over a block of trial ids.

    Trial t here is byte-identical to drawing the sample via the sampler
    functions with the same (seed, trial) and calling ``estimate``: the
    random streams are windowed per trial, and the per-stratum
    accumulation order matches.
    """
    if trials < 1:
        raise InvalidInput("trials must be >= 1")
    h = fn.values
    out = {}
    for sampler in samplers:
        est = np.zeros(trials)
        if sampler == "ns":
            n = allocation.n
            stream = TrialStream(seed, "ns", 0, n)
            for lo in range(0, trials, chunk):
                cnt = min(chunk, trials - lo)
                u = stream.uniform_matrix(trial_start + lo, cnt)
                idx = uniforms_to_indices(u, lattice.size)
                est[lo:lo + cnt] = h[idx].mean(axis=1)
        else:
            if stratification is None:
                raise InvalidInput(f"sampler {sampler!r} requires a stratification")
            for stratum, n_m, w_m in zip(stratification.strata, allocation.counts,
                                         stratification.weights):
                n_m = int(n_m)
                if n_m == 0:
                    raise InvalidInput("Monte Carlo study needs every stratum sampled")
                h_m = h[stratum.pixels]
                draws = draws_per_trial(sampler, n_m)
                stream = TrialStream(seed, sampler, stratum.id, draws)
                refl = stratum.reflection_positions if sampler == "sag" else None
                for lo in range(0, trials, chunk):
                    cnt = min(chunk, trials - lo)
                    u = stream.uniform_matrix(trial_start + lo, cnt)
                    pos = uniforms_to_indices(u, stratum.size)
                    if sampler == "sg":
                        block = h_m[pos]
                    else:
                        pairs = n_m // 2
                        block = np.empty((cnt, n_m))
                        block[:, 0:2 * pairs:2] = h_m[pos[:, :pairs]]
                        block[:, 1:2 * pairs:2] = h_m[refl[pos[:, :pairs]]]
                        if n_m % 2:
                            block[:, -1] = h_m[pos[:, -1]]
                    est[lo:lo + cnt] += float(w_m) * block.mean(axis=1)
        out[sampler] = est
    return MonteCarloResult(trials=trials, seed=seed, estimates=out)


def monte_carlo_study(lattice: PixelLattice, stratification: Stratification,
                      fn: PixelFunction, n: int, trials: int, seed: int,
                      allocation: Allocation | None = None,
                      samplers=("ns", "sg", "sag"), chunk: int = 1024) -> VarianceReport:
    """Analytic report plus Monte Carlo mean/variance per sampler."""
    if trials < 2:
        raise InvalidInput("trials must be >= 2")
    if allocation is None:
        allocation = allocate_proportional(stratification, n)
    report = build_variance_report(stratification, fn, allocation)
    result = mc_estimates(lattice, stratification, fn, allocation, trials, seed,
                          samplers=samplers, chunk=chunk)
    report.mc = {
        "trials": trials,
        "seed": seed,
        "samplers": {
            s: {"mean": result.mean(s), "var": result.variance(s)} for s in samplers
        },
    }
    return report


@dataclass
class CheckResult:
    """Outcome of a closed-form identity or bound check."""

    name: str
    status: str  # "pass" | "fail" | "not_applicable"
    detail: dict


def check_theorem_sg(report: VarianceReport, tol: float = 1e-10) -> CheckResult:
    """var_ns - var_sg must equal the weighted between-group gap, and
    var_sg must not exceed var_ns.

    These are identities only under exact proportional allocation;
    otherwise the check reports not_applicable rather than failing.
    """
    detail = {
        "var_ns": report.var_ns,
        "var_sg": report.var_sg,
        "gap_weighted": report.gap_weighted,
        "gap_unweighted": report.gap_unweighted,
        "residual": report.theorem_residual,
    }
    if not report.proportional_exact:
        return CheckResult("theorem_sg_gap", "not_applicable", detail)
    scale = max(abs(report.var_ns), abs(report.var_sg), 1e-300)
    ok = abs(report.theorem_residual) <= tol * scale + tol
    ok = ok and report.var_sg <= report.var_ns + tol * scale
    return CheckResult("theorem_sg_gap", "pass" if ok else "fail", detail)


def check_lemma_sag(report: VarianceReport, tol: float = 1e-12) -> CheckResult:
    """var_sag <= 2 var_sg + tol. Guaranteed a priori only when every
    stratum's reflection is a bijection (no snapping); checked always."""
    detail = {
        "var_sag": report.var_sag,
        "var_sg": report.var_sg,
        "ratio": report.lemma_ratio,
        "guaranteed": not report.any_snapped,
    }
    ok = report.var_sag <= 2.0 * report.var_sg + tol
    return CheckResult("lemma_sag_bound", "pass" if ok else "fail", detail)


def check_total_variance(report: VarianceReport, tol: float = 1e-10) -> CheckResult:
    """Population variance must split into within- plus between-group parts."""
    ok = report.total_variance_residual <= tol
    return CheckResult("total_variance_identity", "pass" if ok else "fail",
                       {"relative_residual": report.total_variance_residual})


def check_mc_agreement(report: VarianceReport, sigma_band: float = 4.0,
                       var_rtol: float = 0.10) -> CheckResult:
    """Monte Carlo means within CLT bands and variances within tolerance.

    The variance tolerance is the larger of var_rtol and a sigma_band
    multiple of the sampling noise of a sample variance, sqrt(2/(T-1)),
    so low-trial smoke runs are judged at their actual resolution while
    var_rtol binds at large T.
    """
    if not report.mc:
        return CheckResult("mc_agreement", "not_applicable", {})
    trials = report.mc["trials"]
    var_tol = max(var_rtol, sigma_band * math.sqrt(2.0 / max(trials - 1, 1)))
    detail = {}
    ok = True
    for sampler, entry in report.mc["samplers"].items():
        mean, var = report.analytic_for(sampler)
        band = sigma_band * math.sqrt(var / trials) if var > 0 else 1e-12
        mean_ok = abs(entry["mean"] - mean) <= band
        if var > 0:
            var_ok = abs(entry["var"] - var) <= var_tol * var
        else:
            var_ok = entry["var"] <= 1e-18
        detail[sampler] = {
            "mc_mean": entry["mean"], "analytic_mean": mean, "band": band,
            "mc_var": entry["var"], "analytic_var": var, "var_tol": var_tol,
            "mean_ok": mean_ok, "var_ok": var_ok,
        }
        ok = ok and mean_ok and var_ok
    return CheckResult("mc_agreement", "pass" if ok else "fail", detail)


def run_all_checks(report: VarianceReport) -> list[CheckResult]:
    return [
        check_theorem_sg(report),
        check_lemma_sag(report),
        check_total_variance(report),
        check_mc_agreement(report),
    ]
