"""Audit-case drafting pipeline and checklist-based text evaluation."""

__version__ = "0.1.0"
