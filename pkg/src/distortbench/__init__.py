"""Minimal-distortion adversarial benchmark generator.

Builds multi-severity corruption benchmarks by attacking black-box image
classifiers with reversible patch-level distortions, searched by a
sensitivity-guided dueling-DQN policy, and evaluates model robustness on
the result.
"""

from .agent import (
    ActionSpec,
    DQNLearner,
    DuelingQNet,
    ReplayBuffer,
    RewardTerms,
    Transition,
    build_action_space,
    compute_reward,
    load_agent,
    q_values,
    save_agent,
    select_action,
    td_update,
)
from .classifier import (
    Classifier,
    ConstantClassifier,
    QueryCounter,
    RemoteClassifier,
    ToyLinearClassifier,
    load_toy_weights,
    open_victim,
    save_toy_weights,
    toy_linear_predict,
)
from .config import RunConfig, config_hash, resolve_config
from .errors import (
    CalibrationError,
    ConfigError,
    DistortBenchError,
    InvalidArgumentError,
    ProtocolError,
    TransportError,
)
from .filters import (
    DistortionLedger,
    FilterId,
    FilterParams,
    calibrate,
    make_mask,
    mean_application_l2,
    register_filter,
)
from .generator import (
    EpisodeResult,
    escalate_severity,
    generate_episodes,
    run_episode,
    train_agent,
    write_split,
)
from .manifest import Split, intersect_indices, load_split, mean_l2_by_severity
from .metrics import (
    AttackStats,
    ErrorTable,
    RobustnessSummary,
    aggregate,
    attack_stats,
    error_rates,
    l2_match_check,
    transfer_matrix,
)
from .sensitivity import (
    EvalCache,
    SensitivityEntry,
    SensitivityLists,
    build_state,
    scan,
    sensitivity_rows,
    signature_after_action,
    state_length,
)
from .server import ToyServer, serve_toy, start_background
from .storage import (
    load_dataset,
    read_image_tensor,
    write_dataset,
    write_image_tensor,
    write_png_preview,
)
from .tensor import ImageTensor, PatchGrid, clip_unit, l2_distance, partition_patches

__version__ = "0.1.0"
