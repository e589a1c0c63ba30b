"""Two-level level-of-detail 3D brain MRI segmentation."""

from .augment import (
    AugmentationSpec,
    AugmentRow,
    apply_plan,
    augment_sample,
    sample_plan,
)
from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    GeometryError,
    LodsegError,
    MigrationError,
    NumericsError,
    SanitationError,
)
from .evaluator import (
    EvalRecord,
    EvalReport,
    RobustnessRow,
    SurfaceMesh,
    aggregate,
    evaluate_set,
    extract_surface,
    infer_volume,
    rank_discordant,
    robustness_sweep,
    save_aggregate_csv,
    save_mesh_ply,
    save_report_jsonl,
    save_robustness_csv,
)
from .lod_net import (
    NetworkConfig,
    NetworkState,
    SegmentationOutput,
    build,
    forward,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    set_frozen,
    swap_head,
)
from .losses_metrics import DiceResult, dice_coefficient, dice_loss
from .motion_sim import MotionSpec, simulate_motion
from .rng import derive_rng
from .trainer import (
    PlateauScheduler,
    TrainConfig,
    TrainLogRecord,
    load_pair_dataset,
    run_pipeline_raw,
    run_pipeline_skullstripped,
    run_stage,
)
from .volume_io import (
    RAW7,
    RAW8,
    SS4,
    ClassScheme,
    LabelMap,
    Volume,
    check_paired,
    conform,
    get_scheme,
    list_nifti,
    load_labels,
    load_volume,
    nifti_stem,
    normalize_intensity,
    one_hot,
    save_labels,
    save_volume,
)

__version__ = "0.1.0"
