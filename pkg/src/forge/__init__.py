"""Operator extraction, compaction and audit toolkit."""
__version__ = "0.1.0"
