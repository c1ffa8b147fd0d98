"""Three-phase training, evaluation, ablation, benchmarking and the CLI."""

from .config import TrainConfig, read_config_file, write_config_file
from .train import (
    MissingCheckpointError,
    PhaseHistory,
    TrainingDiverged,
    TrainOutcome,
    make_batch,
    phase1_train_two_stream,
    phase2_train_ttn,
    phase3_joint_finetune,
    train_all,
)
from .evaluate import (
    BRANCHES,
    ClassCountMismatch,
    ClipScores,
    RunReport,
    ensemble_scores,
    evaluate,
    read_report,
    read_scores,
    write_report,
    write_scores,
)
from .bench import BenchReport, bench
from .ablate import AblationResult, ablate
from .cli import cli_main
