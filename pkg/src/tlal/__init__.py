"""Committee-based active learning on finetuned CNN backbones for MRI slice classification."""

__version__ = "0.1.0"
