"""Few-shot finetuning with distribution calibration and selected sampling."""

__version__ = "0.1.0"
