"""Causal inference toolkit for confounded answer ranking.

Core pieces: immutable causal graphs with the two de-biasing surgery
operators, exact discrete SCM oracles for interventional and
backdoor-adjusted queries, synthetic confounded ranking worlds with known
ground truth, trainable scorers in shortcut/no-shortcut/dictionary
wirings, dense ranking losses with analytic gradients, ranking metrics,
question-type priors, and a reproducible experiment harness.
"""

from .graphs import (
    CausalGraph,
    CycleIntroduced,
    DuplicateNode,
    GraphError,
    MissingEdge,
    NodeId,
    PathStep,
    UnknownNode,
    apply_p1,
    apply_p2,
    backdoor_paths,
    build_baseline_graph,
    build_proposed_graph,
    d_separated,
    format_path,
    satisfies_backdoor,
)
from .scm import (
    Assignment,
    DiscreteScm,
    IncompleteAssignment,
    ScmError,
    ZeroProbabilityEvidence,
    backdoor_adjust,
    conditional,
    conditional_mutual_information,
    intervene,
    interventional_prob,
    joint_prob,
    joint_table,
    marginal,
    random_cpts,
)
from .world import (
    Candidate,
    Dataset,
    DialogInstance,
    InvalidSpec,
    WorldSpec,
    bias_probe_length,
    bias_probe_wordmatch,
    generate,
    load_dataset,
    oracle_interventional,
    save_dataset,
)
from .losses import (
    LossValue,
    TargetScores,
    loss_ce,
    loss_r0,
    loss_r1,
    loss_r2,
    loss_r3,
)
from .metrics import RankingResult, mean_rank_of, mrr, ndcg, rank_by
from .scorer import (
    FusedState,
    ScorerParams,
    ScoreVector,
    dims_from_instance,
    forward,
    grad,
    init_params,
    load_checkpoint,
    mix_with_prior,
    save_checkpoint,
)
from .qtype import QTypeTable, extract_qtype, fit, prior
from .harness import (
    BiasReport,
    ConfigError,
    DivergenceDetected,
    RunConfig,
    RunReport,
    evaluate_model,
    make_dataset,
    paired_sign_test,
    reference_schedule,
    report_bias,
    run,
    run_matrix,
    train,
    train_single,
)

__version__ = "0.1.0"
