"""
Noms des artefacts d'un répertoire d'exécution.

Un répertoire d'exécution contient les checkpoints de chaque étape, les
fichiers de pseudo-labels, les tables de métriques et le journal d'exécution
sous `logs/`.
"""

LOGS_REL_PATH = "logs"
RUN_LOG_FILE = "run_log.txt"
STAGE_REPORTS_FILE = "stage_reports.csv"

SOURCE_DATASET_DIR = "source"
TARGET_DATASET_DIR = "target"

PRETRAIN_CHECKPOINT = "pretrain.ckpt"
GCC_CHECKPOINT = "gcc.ckpt"
ADAPTED_CHECKPOINT = "adapted.ckpt"

TUPLES_FILE = "tuples.txt"
AUDIT_FILE = "audit.txt"
DIAGNOSTICS_FILE = "pair_diagnostics.jsonl"

RECALL_TABLE = "recall.csv"
PR_CURVE_FILE = "pr_curve.csv"
METRICS_JSON = "metrics.json"
SEPARABILITY_HISTOGRAM = "separability_histogram.csv"
POSITIVE_DISTANCE_HISTOGRAM = "positive_distance_histogram.csv"
ABLATION_TABLE = "ablation.csv"
