import os


def _flag(name: str, default: str) -> bool:
    return os.environ.get(name, default).lower() in ("1", "true", "yes", "on")


# finiteness and domain checks after every tensor op
DEBUG = _flag("STFUSION_DEBUG", "false")

LOG_LEVEL = os.environ.get("STFUSION_LOG_LEVEL", "INFO")

# PNG needs the optional Pillow extra; PGM/PPM are always available
PNG_ENABLED = _flag("STFUSION_PNG", "true")

NUM_WORKERS = int(os.environ.get("STFUSION_NUM_WORKERS", "0"))

CHECKPOINT_MAGIC = b"MCD1"
CHECKPOINT_FORMAT_VERSION = 1
# bump when parameter naming or layer wiring changes
MODEL_CODE_VERSION = 1

BEST_CHECKPOINT_NAME = "best.ckpt"
LAST_CHECKPOINT_NAME = "last.ckpt"
HISTORY_FILE_NAME = "history.jsonl"
METRICS_FILE_NAME = "metrics.csv"
