"""Multitype pure-birth trees: exact edge and triple distributions, tree
simulation, and recovery of speciation and switching rates up to relabelling
of the hidden types."""

__version__ = "0.1.0"

from .edge_process import (
    EdgeRealization,
    absorption_probs,
    joint_parent_density,
    sample_edge,
    speciation_cdf,
    speciation_density,
    transition_matrix,
)
from .gdist import (
    EdgeTriple,
    ExtractionMode,
    MixtureSpec,
    extract_triples,
    g_infinity_cdf,
    g_infinity_density,
    mixture_components,
    sample_triple_analytic,
)
from .identify import (
    FitResult,
    RecoveryReport,
    apply_permutation,
    canonicalize,
    fit_mle,
    negative_loglik,
    recovery_experiment,
)
from .linalg import EigenPair, leading_left_eigenpair, matrix_exp, phi
from .params import ModelParams, genericity_det, genericity_matrix, validate
from .tree_sim import ColoredTree, MetricTree, TypeCount, jump_distribution, simulate_tree, type_counts, uncolor
