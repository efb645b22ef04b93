"""Belief-propagation multiobject tracking with learned message refinement."""

__version__ = "0.1.0"

from .model import (
    AssociationVector,
    KinematicState,
    Measurement,
    MeasurementFrame,
    ModelParams,
    PotentialObject,
    Rect,
    cv_process_cov,
    cv_transition,
    validate_params,
)
from .bp import (
    DaInputs,
    DaMessages,
    Estimate,
    TrackerState,
    bp_step,
    compute_beliefs,
    compute_beta,
    compute_xi,
    declare_and_estimate,
    init_tracker,
    iterate_da,
    predict,
    prune,
)
from .nebp import (
    NebpConfig,
    NebpNets,
    NebpVariant,
    compute_refinements,
    extract_features,
    gnn_pass,
    init_nets,
    load_nets,
    nebp_step,
    save_nets,
)
from .simulate import (
    Dataset,
    ScenarioConfig,
    clutter_mismatch_scenario,
    generate_ground_truth,
    generate_measurements,
    make_dataset,
    matched_params,
)
from .train import (
    TrainConfig,
    calibrate,
    label_frame,
    loss_association,
    loss_rejection,
    track_frames,
    train,
)
from .metrics import EvalReport, clear_sweep, evaluate_tracking, gospa

__all__ = [name for name in dir() if not name.startswith("_")]
