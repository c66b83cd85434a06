"""Differentially private top-k selection.

The Lipschitz mechanism adds noise from a distribution with a 1-Lipschitz
log-survival function to (negated, rescaled) losses and reports the largest
noisy values. The Canonical Lipschitz mechanism applies it directly to
k-subsets, grouped into utility classes so sampling stays O(dk).
"""

from dptopk.analysis import (
    BoundInputs,
    Predicate,
    brute_force_distribution,
    canonical_loss_oracle,
    dp_audit_exact,
    joint_loss,
    leap_expectations,
    mc_estimate,
    predicate_probability,
    utility_bound,
)
from dptopk.canonical import (
    ClassDistribution,
    Selection,
    UtilityClass,
    canonical_select,
    class_loss,
    classify_subset,
    exact_class_distribution,
    log_class_size,
    log_class_size_sum,
    sample_class,
    sample_member,
)
from dptopk.harness import ExperimentSpec, bench, gen_zipf, load_scores, run_sweep
from dptopk.mechanisms import (
    MechanismParams,
    effective_sensitivity,
    lipschitz_select,
    oneshot,
    peel,
    permute_and_flip_ref,
)
from dptopk.noise import LogUniform, NoiseKind, group_max_noise, inv_cdf, top_order_noise, verify_lipschitz
from dptopk.scores import ScoreVector

__version__ = "0.1.0"
