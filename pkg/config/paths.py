from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]

APPS_DIR = PROJECT_ROOT / "apps"
CONFIG_DIR = PROJECT_ROOT / "config"

RUNS_DIR = PROJECT_ROOT / "runs"

DOCS_DIR = PROJECT_ROOT / "docs"
DOCS_DATA_DIR = DOCS_DIR / "data"

DEFAULT_CONFIG_INI = CONFIG_DIR / "default.ini"
RESOLVED_CONFIG_NAME = "resolved_config.ini"

DOCS_PATTERNS_JSON = DOCS_DATA_DIR / "patterns.json"
DOCS_FLOPS_CSV = DOCS_DATA_DIR / "flops_vit_b_batch64.csv"
