"""Multi-gripper grasp labeling, planning and evaluation on binary rasters."""

__version__ = "0.1.0"

MODEL_FORMAT = "GLW1"
JSONL_SCHEMA_VERSION = 1
