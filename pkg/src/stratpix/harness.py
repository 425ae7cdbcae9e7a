"""Experiment orchestration: variance studies, convergence runs, reports.

Everything here is a deterministic function of (config, seeds): outputs
carry no timestamps, floats are serialized with repr, JSON keys are
sorted, and Monte Carlo work is split into contiguous trial blocks whose
per-trial random windows do not depend on how many workers consumed
them, so --jobs only changes wall-clock time, never bytes.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path

import numpy as np

from .contrastive import FineTuneConfig
from .errors import ConfigError, Diverged, InvalidInput
from .estimate import (MonteCarloResult, PixelFunction,
                       build_variance_report, mc_estimates, run_all_checks,
                       save_report)
from .ioutil import atomic_write_text
from .lattice import (PixelLattice, SCHEMES, build_stratification,
                      load_lattice)
from .model import ToyModel, apply_model, build_features, feature_dim
from .sampling import SAMPLERS, allocate_proportional
from .synthetic import SyntheticSpec, gen_data, generate_lattice
from .trainer import (ConvergenceConfig, TrainData, TrajectoryLog, dice,
                      fit_rate, make_labeled_mask, noise_controlled_descent,
                      pretrain, quad_summary, sgd_train, write_jsonl,
                      write_trajectories)


@dataclass
class ExperimentConfig:
    """One experiment: lattice source, stratification, budgets, seeds."""

    lattice_file: str | None = None
    synthetic: SyntheticSpec | None = None
    scheme: str = "grid_class"
    cell_shape: tuple = (8, 8)
    samplers: tuple = ("ns", "sg", "sag")
    n: int = 0                      # 0 means census budget |P|
    trials: int = 1000
    seed: int = 0
    seeds: tuple = tuple(range(10))
    payload_column: int = 0
    out: str = "out"
    jobs: int = 1
    # training
    steps: int = 200
    n_anchors: int = 64
    hidden_dim: int = 16
    n_rep: int = 8
    step_rule: str = "constant"
    constant_step: float = 0.5
    alpha: float = 1.0
    threshold: float = 1e-3
    labeled_fraction: float = 0.1
    pretrain_steps: int = 0
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    # noise-controlled quadratic sweep
    sigma_list: tuple = (0.0, 0.5, 1.0, 2.0)
    quad_dim: int = 16
    quad_T: int = 400
    quad_seeds: tuple = tuple(range(30))

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidInput(f"scheme must be one of {SCHEMES}")
        samplers = self.samplers
        if isinstance(samplers, str):
            samplers = (samplers,)
        samplers = tuple(samplers)
        if samplers == ("all",):
            samplers = SAMPLERS
        for s in samplers:
            if s not in SAMPLERS:
                raise InvalidInput(f"unknown sampler {s!r}")
        self.samplers = samplers
        self.cell_shape = tuple(int(c) for c in self.cell_shape)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.quad_seeds = tuple(int(s) for s in self.quad_seeds)
        self.sigma_list = tuple(float(s) for s in self.sigma_list)
        if self.trials < 2:
            raise InvalidInput("trials must be >= 2")
        if self.jobs < 1:
            raise InvalidInput("jobs must be >= 1")


def load_experiment_config(path) -> ExperimentConfig:
    """Read an ExperimentConfig from JSON or TOML by field name."""
    path = Path(path)
    try:
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            obj = tomllib.loads(path.read_text())
        else:
            obj = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_obj(obj, source=str(path))


def config_from_obj(obj: dict, source: str = "<dict>") -> ExperimentConfig:
    known = {f.name for f in dataclass_fields(ExperimentConfig)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown config fields in {source}: {sorted(unknown)}")
    kwargs = dict(obj)
    try:
        if "synthetic" in kwargs and kwargs["synthetic"] is not None:
            kwargs["synthetic"] = SyntheticSpec(**kwargs["synthetic"])
        if "finetune" in kwargs and kwargs["finetune"] is not None:
            kwargs["finetune"] = FineTuneConfig(**kwargs["finetune"])
        return ExperimentConfig(**kwargs)
    except (TypeError, InvalidInput) as exc:
        raise ConfigError(f"bad config values in {source}: {exc}") from exc


def resolve_lattice(config: ExperimentConfig) -> PixelLattice:
    if config.lattice_file:
        path = Path(config.lattice_file)
        if not path.exists():
            raise ConfigError(f"lattice file not found: {path}")
        return load_lattice(path)
    if config.synthetic is not None:
        return generate_lattice(config.synthetic)
    raise ConfigError("config needs either lattice_file or synthetic")


def pixel_function_for(config: ExperimentConfig,
                       lattice: PixelLattice) -> PixelFunction:
    """h from the configured payload column, or the class map if none."""
    if lattice.payload is not None:
        return PixelFunction.from_payload(lattice, config.payload_column)
    return PixelFunction(lattice.classes.astype(np.float64), name="class_id")


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# gen-data

def run_gen_data(config: ExperimentConfig, out_dir: Path) -> int:
    if config.synthetic is None:
        raise ConfigError("gen-data needs a synthetic section in the config")
    out_dir.mkdir(parents=True, exist_ok=True)
    gen_data(config.synthetic, out_dir / "lattice.json")
    return 0


# ---------------------------------------------------------------------------
# variance study

def _mc_block(args):
    lattice, strat, fn, allocation, samplers, seed, start, count = args
    result = mc_estimates(lattice, strat, fn, allocation, count, seed,
                          samplers=samplers, trial_start=start)
    return result.estimates


def _parallel_mc(lattice, strat, fn, allocation, samplers, trials, seed,
                 jobs: int) -> MonteCarloResult:
    if jobs <= 1:
        return mc_estimates(lattice, strat, fn, allocation, trials, seed,
                            samplers=samplers)
    # Precompute reflection tables so workers inherit them via pickling.
    for stratum in strat.strata:
        stratum.reflection_positions
    bounds = np.linspace(0, trials, jobs + 1).astype(int)
    tasks = [
        (lattice, strat, fn, allocation, samplers, seed, int(lo), int(hi - lo))
        for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo
    ]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        blocks = list(pool.map(_mc_block, tasks))
    estimates = {
        s: np.concatenate([b[s] for b in blocks]) for s in samplers
    }
    return MonteCarloResult(trials=trials, seed=seed, estimates=estimates)


def run_variance_study(config: ExperimentConfig, out_dir: Path,
                       jobs: int | None = None) -> int:
    """Analytic + Monte Carlo study; exit 1 iff a mathematical check fails."""
    jobs = config.jobs if jobs is None else jobs
    out_dir.mkdir(parents=True, exist_ok=True)
    lattice = resolve_lattice(config)
    strat = build_stratification(lattice, config.scheme, config.cell_shape)
    fn = pixel_function_for(config, lattice)
    n = config.n or lattice.size
    allocation = allocate_proportional(strat, n)

    report = build_variance_report(strat, fn, allocation)
    result = _parallel_mc(lattice, strat, fn, allocation, config.samplers,
                          config.trials, config.seed, jobs)
    report.mc = {
        "trials": config.trials,
        "seed": config.seed,
        "samplers": {s: {"mean": result.mean(s), "var": result.variance(s)}
                     for s in config.samplers},
    }
    checks = run_all_checks(report)

    save_report(report, out_dir / "report.json")
    atomic_write_text(out_dir / "checks.json", json.dumps(
        [{"name": c.name, "status": c.status, "detail": c.detail} for c in checks],
        sort_keys=True, indent=2) + "\n")

    rows = []
    for s in config.samplers:
        mean, var = report.analytic_for(s)
        entry = report.mc["samplers"][s]
        rows.append([s, repr(var), repr(entry["var"]), repr(mean), repr(entry["mean"])])
    atomic_write_text(out_dir / "plot_variance_by_sampler.csv", _csv_text(
        ["sampler", "analytic_var", "mc_var", "analytic_mean", "mc_mean"], rows))

    gap_rows = [[k, repr(v)] for k, v in [
        ("var_ns", report.var_ns),
        ("var_sg", report.var_sg),
        ("var_sag", report.var_sag),
        ("gap_weighted", report.gap_weighted),
        ("gap_unweighted", report.gap_unweighted),
        ("theorem_residual", report.theorem_residual),
        ("within_group_variance", report.sigma2 - report.gap_weighted * report.n),
        ("between_group_variance", report.gap_weighted * report.n),
    ]]
    atomic_write_text(out_dir / "plot_gap_decomposition.csv",
                      _csv_text(["quantity", "value"], gap_rows))

    return 1 if any(c.status == "fail" for c in checks) else 0


# ---------------------------------------------------------------------------
# convergence study

def _build_train_problem(config: ExperimentConfig, lattice: PixelLattice):
    strat = build_stratification(lattice, config.scheme, config.cell_shape)
    labeled = make_labeled_mask(lattice, config.labeled_fraction, seed=config.seed)
    data = TrainData(
        lattice=lattice,
        stratification=strat,
        labels=lattice.classes,
        labeled_mask=labeled,
        n_anchors=config.n_anchors,
        finetune=config.finetune,
    )
    return strat, data


def _run_one_training(args):
    config, lattice, sampler, seed = args
    _, data = _build_train_problem(config, lattice)
    model = ToyModel.init(feature_dim(lattice), config.hidden_dim,
                          lattice.num_classes, config.n_rep, seed=seed)
    if config.pretrain_steps:
        pretrain(model, data, config.pretrain_steps, seed=seed)
    conv = ConvergenceConfig(
        T=config.steps, alpha=config.alpha, seeds=(seed,),
        step_rule=config.step_rule, constant_step=config.constant_step,
        threshold=config.threshold)
    if config.step_rule == "prop1":
        conv = _with_estimated_rates(conv, config, data, model, sampler, seed)
    try:
        log = sgd_train(model, data, sampler, conv, seed=seed)
    except Diverged as exc:
        log = exc.log
    return sampler, seed, log, model


def _with_estimated_rates(conv: ConvergenceConfig, config: ExperimentConfig,
                          data: TrainData, model: ToyModel, sampler: str,
                          seed: int) -> ConvergenceConfig:
    from .sampling import draw_sample
    from .trainer import (Batch, MemoryBank, census_anchors,
                          estimate_grad_noise, estimate_smoothness,
                          grad_total_loss)

    allocation = None
    if sampler in ("sg", "sag"):
        allocation = allocate_proportional(data.stratification, data.n_anchors)
    teacher = model.copy()
    batch = Batch(features=data.features, labels=data.labels,
                  labeled_mask=data.labeled_mask, teacher=teacher,
                  bank=MemoryBank(data.bank_capacity))
    census = census_anchors(data.lattice)

    def census_grad(theta):
        probe = model.copy()
        probe.theta = theta
        return grad_total_loss(probe, batch, census, data.finetune).grad

    def sampled_grad(trial):
        anchors = draw_sample(sampler, data.lattice, data.stratification,
                              allocation, data.n_anchors, seed, trial=trial)
        return grad_total_loss(model, batch, anchors, data.finetune).grad

    l_hat = estimate_smoothness(census_grad, model.theta, seed=seed)
    sigma_g = estimate_grad_noise(sampled_grad)
    return ConvergenceConfig(
        T=conv.T, alpha=conv.alpha, l_hat=l_hat, sigma_g_hat=sigma_g,
        seeds=conv.seeds, step_rule="prop1", constant_step=conv.constant_step,
        threshold=conv.threshold, checkpoint_every=conv.checkpoint_every)


def run_convergence(config: ExperimentConfig, out_dir: Path,
                    jobs: int | None = None) -> int:
    """Multi-seed training per sampler; divergence recorded, never fatal."""
    jobs = config.jobs if jobs is None else jobs
    out_dir.mkdir(parents=True, exist_ok=True)
    lattice = resolve_lattice(config)

    tasks = [(config, lattice, sampler, seed)
             for sampler in config.samplers for seed in config.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one_training, tasks))
    else:
        results = [_run_one_training(t) for t in tasks]

    by_sampler: dict[str, list[TrajectoryLog]] = {s: [] for s in config.samplers}
    for sampler, _seed, log, _model in results:
        by_sampler[sampler].append(log)

    summary = {}
    for sampler, logs in by_sampler.items():
        logs = sorted(logs, key=lambda l: l.seed)
        write_trajectories(logs, out_dir / f"trajectories_{sampler}.csv")
        _write_mean_std_trajectory(logs, out_dir / f"summary_{sampler}.csv")
        steps_to = {}
        for log in logs:
            hit = next((r.step for r in log.records
                        if r.grad_sq_norm <= config.threshold), None)
            steps_to[str(log.seed)] = hit
        complete = [log for log in logs if not log.diverged]
        finals = [log.records[-1].loss_contrast for log in complete if log.records]
        summary[sampler] = {
            "seeds": [log.seed for log in logs],
            "diverged_seeds": [log.seed for log in logs if log.diverged],
            "steps_to_threshold": steps_to,
            "mean_steps_to_threshold": _mean_steps(steps_to, config.steps),
            "final_loss_contrast_mean": float(np.mean(finals)) if finals else None,
        }
    atomic_write_text(out_dir / "summary.json",
                      json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return 0


def _mean_steps(steps_to: dict, censored: int) -> float:
    vals = [censored if v is None else v for v in steps_to.values()]
    return float(np.mean(vals)) if vals else float(censored)


def _write_mean_std_trajectory(logs: list[TrajectoryLog], path: Path):
    complete = [log for log in logs if log.records]
    steps = min(len(log.records) for log in complete) if complete else 0
    rows = []
    for t in range(steps):
        row = [str(t)]
        for name in ("loss_total", "loss_contrast", "grad_sq_norm"):
            vals = np.array([getattr(log.records[t], name) for log in complete])
            row += [repr(float(vals.mean())), repr(float(vals.std()))]
        rows.append(row)
    header = ["step",
              "mean_loss_total", "std_loss_total",
              "mean_loss_contrast", "std_loss_contrast",
              "mean_grad_sq_norm", "std_grad_sq_norm"]
    atomic_write_text(path, _csv_text(header, rows))


# ---------------------------------------------------------------------------
# noise-controlled quadratic sweep

def run_sigma_sweep(config: ExperimentConfig, out_dir: Path) -> int:
    """Quadratic testbed sweep; exit 1 if steps-to-threshold is not
    monotone (nondecreasing means) in sigma."""
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = noise_controlled_descent(config.quad_dim, config.sigma_list,
                                    config.quad_T, config.quad_seeds,
                                    alpha=config.alpha,
                                    threshold=config.threshold)
    rows = []
    for r in runs:
        c1, c2 = fit_rate(r.grad_sq_traj)
        rows.append([repr(r.sigma), str(r.seed), str(r.steps),
                     str(r.reached), repr(c1), repr(c2)])
    atomic_write_text(out_dir / "quad_runs.csv", _csv_text(
        ["sigma", "seed", "steps", "reached", "c1_fit", "c2_fit"], rows))

    table = quad_summary(runs)
    srows = [[repr(e["sigma"]), repr(e["mean_steps"]), repr(e["std_steps"]),
              repr(e["reached_fraction"])] for e in table]
    atomic_write_text(out_dir / "sigma_sweep.csv", _csv_text(
        ["sigma", "mean_steps", "std_steps", "reached_fraction"], srows))

    means = [e["mean_steps"] for e in table]
    monotone = all(b >= a for a, b in zip(means, means[1:]))
    return 0 if monotone else 1


# ---------------------------------------------------------------------------
# single training run

def run_train(config: ExperimentConfig, out_dir: Path,
              sampler: str | None = None, seed: int | None = None) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    sampler = sampler or config.samplers[0]
    seed = config.seeds[0] if seed is None else seed
    lattice = resolve_lattice(config)
    sampler_, seed_, log, model = _run_one_training((config, lattice, sampler, seed))

    write_trajectories([log], out_dir / "trajectory.csv")
    write_jsonl(log, out_dir / "loss_steps.jsonl")

    # Final segmentation quality of the student on the full lattice.
    metrics = {"sampler": sampler_, "seed": seed_, "diverged": log.diverged,
               "steps_run": len(log.records)}
    if not log.diverged:
        features = build_features(lattice)
        outputs = apply_model(model, features)
        predicted = np.argmax(outputs.logits, axis=1)
        metrics["dice"] = {
            str(k): dice(predicted, lattice.classes, k)
            for k in range(lattice.num_classes)
        }
        metrics["accuracy"] = float(np.mean(predicted == lattice.classes))
    atomic_write_text(out_dir / "metrics.json",
                      json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------
# report

def render_report(out_dir: Path) -> tuple[str, int]:
    """Markdown summary of whatever results are present; exit 1 on FAIL."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise IOError(f"results directory not found: {out_dir}")
    lines = ["# Results summary", ""]
    found = False
    failures = 0

    checks_path = out_dir / "checks.json"
    if checks_path.exists():
        found = True
        lines.append("## Variance-study checks")
        for check in json.loads(checks_path.read_text()):
            status = check["status"]
            label = {"pass": "PASS", "fail": "FAIL",
                     "not_applicable": "NOT APPLICABLE"}[status]
            if status == "fail":
                failures += 1
            lines.append(f"- {label} {check['name']}")
        lines.append("")
        if (out_dir / "report.csv").exists():
            lines.append("Plot data: report.csv, plot_variance_by_sampler.csv, "
                         "plot_gap_decomposition.csv")
            lines.append("")

    summary_path = out_dir / "summary.json"
    if summary_path.exists():
        found = True
        lines.append("## Convergence runs")
        summary = json.loads(summary_path.read_text())
        for sampler in sorted(summary):
            entry = summary[sampler]
            lines.append(
                f"- {sampler}: mean steps to threshold "
                f"{entry['mean_steps_to_threshold']}, final contrastive loss "
                f"{entry['final_loss_contrast_mean']}, diverged seeds "
                f"{entry['diverged_seeds']}")
        lines.append("")
        lines.append("Plot data: trajectories_<sampler>.csv, summary_<sampler>.csv")
        lines.append("")

    sweep_path = out_dir / "sigma_sweep.csv"
    if sweep_path.exists():
        found = True
        lines.append("## Noise-controlled quadratic sweep")
        with open(sweep_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        means = [float(r["mean_steps"]) for r in rows]
        monotone = all(b >= a for a, b in zip(means, means[1:]))
        label = "PASS" if monotone else "FAIL"
        if not monotone:
            failures += 1
        lines.append(f"- {label} steps_to_threshold_monotone_in_sigma")
        for r in rows:
            lines.append(f"  - sigma={r['sigma']}: mean steps {r['mean_steps']}")
        lines.append("")
        lines.append("Plot data: sigma_sweep.csv, quad_runs.csv")
        lines.append("")

    metrics_path = out_dir / "metrics.json"
    if metrics_path.exists():
        found = True
        metrics = json.loads(metrics_path.read_text())
        lines.append("## Training run")
        lines.append(f"- sampler {metrics.get('sampler')}, seed "
                     f"{metrics.get('seed')}, diverged {metrics.get('diverged')}")
        if "accuracy" in metrics:
            dice = metrics.get("dice", {})
            dice_txt = ", ".join(f"class {c}: {v:.3f}"
                                 for c, v in sorted(dice.items()))
            lines.append(f"- accuracy {metrics['accuracy']:.3f} ({dice_txt})")
        lines.append("")

    if not found:
        lines.append("no results found")
    text = "\n".join(lines).rstrip() + "\n"
    return text, (1 if failures else 0)


def run_report(out_dir: Path) -> int:
    text, code = render_report(out_dir)
    atomic_write_text(Path(out_dir) / "report.md", text)
    print(text, end="")
    return code
