"""
Miscellaneous helper functions and constants
"""
import os

import numpy as np

#################
### CONSTANTS ###
#################

CROP_SIZE = 352 # side length of square training crops, divisible by 4
INPUT_MULTIPLE = 4 # forward pads inputs up to a multiple of this
MIN_INPUT_SIDE = 16 # smallest accepted input height/width

GT_THRESHOLD = 0.1 # gt values above this get GT_OFFSET added
GT_OFFSET = 0.2

TEEDUP_SCALE = 1.5 # input upscale factor of the TEEDup inference variant

MATCH_TOLERANCE = 0.0075 # matching radius as a fraction of the image diagonal
GT_EDGE_LEVEL = 0.5 # gt pixels at or above this count as edges when scoring
N_THRESHOLDS = 99 # thresholds 0.01..0.99 for ODS/OIS sweeps
NMS_SIGMA = 1.5 # gaussian smoothing before orientation estimation
NMS_TIE_TOL = 1e-6 # raw values closer than this count as equal
NMS_PLATEAU = 0.75 # a neighbor sample at this fraction of the centre value or above lies on the same plateau
PSNR_CAP = 99.0 # dB reported when MSE is (numerically) zero
PSNR_MIN_MSE = 1e-10

MAX_CURATION_SIDE = 720 # images larger than this are not considered for curation
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

CHECKPOINT_MAGIC = b"TEEDCKPT\x01"

THREADS_ENV_VAR = "TEED_THREADS"

LOSS_LOG_COLUMNS = ["iter", "epoch", "lr", "dloss", "wce1", "wce2", "wce3", "trcg"]

_DETERMINISTIC = False


#################
### FUNCTIONS ###
#################

def set_deterministic(flag: bool = True) -> None:
    """Switch strict single-threaded mode on or off for the whole process.
    Worker pools then run with one worker so results never depend on scheduling.
    """
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)

def is_deterministic() -> bool:
    return _DETERMINISTIC

def num_threads() -> int:
    """Number of worker threads to use for loading and scoring.

    Returns:
        int: 1 in deterministic mode, else TEED_THREADS if set, else the CPU count
    """
    if _DETERMINISTIC:
        return 1
    env = os.environ.get(THREADS_ENV_VAR, "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            print(f"Ignoring non-integer {THREADS_ENV_VAR}={env!r}")
    return max(1, os.cpu_count() or 1)

def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, key...) tuple, e.g. (seed, epoch, sample index).
    Streams do not depend on the order in which they are requested.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))

def thresholds(n: int = N_THRESHOLDS) -> np.ndarray:
    """Uniform threshold levels strictly inside (0, 1), 0.01..0.99 for n=99"""
    return np.round(np.linspace(1.0 / (n + 1), n / (n + 1), n), 10)

def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))
