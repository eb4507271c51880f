"""roadgen: multi-source domain-generalization trainer for road defect classes."""

__version__ = "0.1.0"
