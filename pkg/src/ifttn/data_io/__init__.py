"""File formats, motion-vector degradation, checkpoints and the synthetic dataset."""

from .motion import BLOCK, DENSE, MotionMap, degrade_flow_to_mv, mv_to_dense
from .formats import (
    BadTagError,
    FormatError,
    TruncatedFileError,
    read_flo,
    read_mvq,
    read_rten,
    write_flo,
    write_mvq,
    write_rten,
)
from .synthetic import PRESETS, SyntheticConfig, gen_synthetic, generate_clip, generate_in_memory
from .dataset import FLOW, MV, Dataset, degrade_samples, load_clip, load_split, read_index
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    load_into_model,
    read_checkpoint,
    save_checkpoint,
)
