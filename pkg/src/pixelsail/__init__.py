"""Single-transformer pixel-grounded vision-language model at desk scale."""

__version__ = "0.1.0"
