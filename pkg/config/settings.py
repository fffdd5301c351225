"""Project-wide defaults for exnet runs."""

PROJECT_NAME = "exnet"

SCHEMA_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
TABLES_FORMAT_VERSION = 1

# ==== Network dimensions ====
D_PRIMARY = 8
D_COMPLEMENTARY = 8
HIDDEN_WIDTH = 32
HIDDEN_ACTIVATION = "tanh"
OUTPUT_ACTIVATION = "identity"

# ==== Optimizers ====
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# ==== Gradient audits ====
GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
# Denominator floor for relative errors: finite differences of gradient entries
# below this magnitude are compared absolutely.
GRADCHECK_REL_FLOOR = 1e-4

# ==== XProp-A ====
MAX_TRAINING_SET = 512

# ==== Outputs ====
OUTPUT_DIR = "runs"
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.npz"
TABLES_FILE = "tables.npz"
TRAINING_SET_FILE = "training_set.json"
GRAPH_FILE = "graph.dot"
CONSISTENCY_FILE = "consistency.txt"
SUMMARY_FILE = "summary.json"

METRIC_COLUMNS = ["trial", "loss", "prediction_norm", "grad_norm", "local_disagreement"]
AEON_COLUMNS = METRIC_COLUMNS + ["aeon", "heldout_loss", "consistent"]
FLOAT_FORMAT = "%.17g"

LOG_LEVEL_ENV = "EXNET_LOG_LEVEL"
DEFAULT_LOG_LEVEL = "INFO"

# ==== Exit codes ====
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_INCONSISTENT = 4
EXIT_GRADCHECK = 5
