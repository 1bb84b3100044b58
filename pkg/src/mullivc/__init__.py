"""Cross-lingual voice conversion with three-substep cycle training."""

__version__ = "0.1.0"
