"""
Configuration settings for gt-conformal.

Defaults can be overridden through environment variables or a `.env` file.
"""
import os
from dotenv import load_dotenv
from pathlib import Path

# Load environment variables from .env file
load_dotenv()

# Randomness
DEFAULT_SEED = int(os.getenv("GTC_SEED", "0"))

# Significance budget
DEFAULT_ALPHA = float(os.getenv("GTC_ALPHA", "0.1"))

# Base classifier (k-nearest neighbors with inverse-distance weights)
KNN_NEIGHBORS = int(os.getenv("GTC_KNN_NEIGHBORS", "5"))
KNN_METRIC = os.getenv("GTC_KNN_METRIC", "euclidean").lower()  # Options: euclidean, cosine
DISTANCE_FLOOR = 1e-12

# One-class scorer used by the feature-based Good-Turing p-values
LOF_NEIGHBORS = int(os.getenv("GTC_LOF_NEIGHBORS", "20"))

# Multiple testing constants for the seen-label p-value
POWER_LAW_BETA = float(os.getenv("GTC_POWER_LAW_BETA", "1.6"))

# Sample splitting
CAL_FRACTION = float(os.getenv("GTC_CAL_FRACTION", "0.1"))
# Noise added to probabilities of calibration labels missing from training,
# as a fraction of the smoothed probability
SMOOTHING_NOISE = float(os.getenv("GTC_SMOOTHING_NOISE", "0.1"))

# Budget allocation tuning
TUNING_LAMBDA = float(os.getenv("GTC_TUNING_LAMBDA", "0.5"))
TUNING_FOLDS = int(os.getenv("GTC_TUNING_FOLDS", "10"))
TUNING_MIN_FOLD_SIZE = 10
ALPHA_SEEN_CANDIDATES = (0.0, 0.01, 0.02, 0.05, 0.1)
ALPHA_CLASS_START = 0.01
ALPHA_CLASS_STEP = 0.005

# Simulation defaults (desk scale)
DP_DIM = int(os.getenv("GTC_DP_DIM", "3"))
DP_SIGMA2 = float(os.getenv("GTC_DP_SIGMA2", "5e-6"))
DEFAULT_N = int(os.getenv("GTC_N", "500"))
DEFAULT_REPS = int(os.getenv("GTC_REPS", "20"))
DEFAULT_TESTS = int(os.getenv("GTC_TESTS", "200"))
WORKERS = int(os.getenv("GTC_WORKERS", "1"))

# Lower edges of the frequency bins above "very rare" (counts 0 and 1)
BIN_EDGES = tuple(int(edge) for edge in os.getenv("GTC_BIN_EDGES", "2,6,21").split(","))
BIN_NAMES = ("very-rare", "rare", "common", "frequent")

# Logging
LOG_LEVEL = os.getenv("GTC_LOG_LEVEL", "WARNING").upper()

# Paths
OUTPUT_DIR = Path(os.getenv("GTC_OUTPUT_DIR", "results"))
