"""Critical parameters of continuous-time branching random walks.

Estimators for the growth rates of n-step weights and generation masses,
generating-function fixed points for extinction probabilities, survival
witnesses and threshold brackets, and an event-driven Monte Carlo engine,
together with a zoo of model constructors and a CLI.
"""
from brwlab.ratematrix import (
    ContractError,
    RateMatrix,
    RootEstimate,
    SeriesEvaluation,
    SeriesTable,
    build_series_table,
    check_series_identities,
    estimate_Ks,
    estimate_Kw,
    evaluate_H,
    evaluate_Phi,
    evaluate_Theta,
    lambda_s_from_phi,
    row_apply,
)
from brwlab.models import (
    MODEL_REGISTRY,
    BrwModel,
    ModelSpec,
    OscillatingSequence,
    PieceSpec,
    ProjectionMap,
    ProjectionReport,
    build_bpve,
    build_example_finally,
    build_feedback_line,
    build_from_spec,
    build_oscillating_sequence,
    build_periodic_tree_like,
    build_regular_tree,
    build_single_site,
    build_star_of_lines,
    build_tree_with_lines,
    dump_model_spec,
    load_model_spec,
    make_model_spec,
    model_from_matrix,
    project_onto_classes,
    verify_projection,
)

__version__ = "0.1.0"
