"""Split federated LoRA fine-tuning engine and simulator."""
__version__ = "0.1.0"
