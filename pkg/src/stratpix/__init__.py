"""Variance-reduced pixel sampling and contrastive fine-tuning experiments.

The package splits into a sampling/estimation core (lattice, sampling,
estimate), a loss stack with exact gradients (contrastive, model), a small
SGD trainer plus quadratic testbed (trainer), and an experiment harness
with a CLI (harness, cli). Synthetic data lives in synthetic.
"""

from .contrastive import (FineTuneConfig, KeySets, LossParts, MemoryBank,
                          RepresentationMap, bank_push, build_key_sets,
                          contrastive_loss, contrastive_loss_grad, ema_update,
                          instance_discrimination_grad,
                          instance_discrimination_loss, l2_normalize,
                          load_finetune_config, nn_loss, nn_loss_grad,
                          soft_dice_loss_grad, sup_loss, sup_loss_grad,
                          total_finetune_loss, unsup_loss, unsup_loss_grad)
from .errors import ConfigError, Diverged, InvalidInput
from .estimate import (CheckResult, MonteCarloResult, PixelFunction,
                       StratumStats, VarianceReport, aggregate_exact,
                       analytic_mean, analytic_variance, build_variance_report,
                       check_lemma_sag, check_mc_agreement, check_theorem_sg,
                       check_total_variance, estimate, load_report,
                       mc_estimates, monte_carlo_study, run_all_checks,
                       save_report, stratum_stats)
from .harness import (ExperimentConfig, config_from_obj, load_experiment_config,
                      render_report, resolve_lattice, run_convergence,
                      run_gen_data, run_report, run_sigma_sweep, run_train,
                      run_variance_study)
from .lattice import (PixelLattice, Stratification, Stratum,
                      build_class_grid_stratification,
                      build_class_stratification, build_grid_stratification,
                      build_stratification, load_lattice, reflect, save_lattice)
from .model import (ModelOutputs, ToyModel, apply_model, backward,
                    build_features, feature_dim, forward)
from .rng import TrialStream, uniforms_to_indices
from .sampling import (Allocation, SampleGroup, SampleSet, allocate_proportional,
                       draw_sample, draws_per_trial, load_sample_set,
                       sample_ns, sample_sag, sample_sg, save_sample_set,
                       smallest_exact_proportional_n)
from .synthetic import (SyntheticSpec, class_fractions, gen_data,
                        generate_lattice, realized_fractions)
from .trainer import (Batch, ConvergenceConfig, QuadRun, StepRecord, TrainData,
                      TrajectoryLog, census_anchors, dice, estimate_grad_noise,
                      estimate_smoothness, fit_rate, gd_steps_closed_form,
                      grad_total_loss, make_labeled_mask,
                      noise_controlled_descent, pretrain, quad_eigenvalues,
                      quad_summary, sgd_train, step_size, write_jsonl,
                      write_trajectories)

__all__ = [name for name in dir() if not name.startswith("_")]
