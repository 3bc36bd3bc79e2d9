"""Online failure detection and recovery for symbolic kitchen tasks."""

__version__ = "0.1.0"
