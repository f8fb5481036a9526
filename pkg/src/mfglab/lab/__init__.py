"""Experiment configuration, report files, runners and the command line."""
from .config import ExperimentConfig
from .io import ReportRecord, ReportWriter

__all__ = ["ExperimentConfig", "ReportRecord", "ReportWriter"]
