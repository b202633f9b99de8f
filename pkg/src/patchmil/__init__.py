"""patchmil: self-supervised double-tier patch encoder + context-aware MIL head."""

__version__ = "0.1.0"
