from __future__ import annotations

import logging

from rich.logging import RichHandler

NAME = "survfuse"

logger = logging.getLogger(NAME)
logger.addHandler(
    RichHandler(
        show_path=False,
        omit_repeated_times=False,
        markup=True,
    )
)

# SeLU constants, the fixed point of self-normalization
SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805
# Value a dropped unit takes in alpha dropout: lim_{x -> -inf} selu(x)
ALPHA_PRIME = -SELU_LAMBDA * SELU_ALPHA

# Lower clamp of log arguments in the survival likelihood
LOG_FLOOR = 1e-7
# Floor of the relative error denominator in gradient checks
GRAD_CHECK_FLOOR = 1e-8
# Floor of standardization scales
SCALE_FLOOR = 1e-8

N_BINS = 4
DEFAULT_KEEP_PROB = 0.75
DEFAULT_IG_STEPS = 50
DEFAULT_TOP_FRAC = 0.01

# TIL co-localization heuristic, all strict ">"
TIL_MIN_CELLS = 20
TIL_MIN_LYMPHOCYTES = 10
TIL_MIN_TUMOR = 5

MOLECULAR_KINDS = ("mutation", "cnv", "rnaseq")

ENV_SEED = "RJC_SEED"

EMBEDDING_KEYS = ["patient_id", "slide_id", "patch_x", "patch_y"]
LABEL_COLUMNS = ["patient_id", "time_months", "censored"]
META_COLUMNS = ["feature", "kind"]
CELLCOUNT_COLUMNS = ["patient_id", "patch_id", "total", "lymphocytes", "tumor"]
PREDICTION_COLUMNS = ["patient_id", "fold", "risk", "t_cont", "censored"]

CHECKPOINT_FORMAT = "survfuse-checkpoint"
CHECKPOINT_VERSION = 1

BAG_MAGIC = b"SFBAG\0"
BAG_VERSION = 1

SECTION_MODEL = "model"
SECTION_TRAIN = "train"
SECTION_DATA = "data"
SECTION_EVAL = "eval"
