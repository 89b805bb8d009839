"""Bivariate linear mixed models for two longitudinal markers."""

__version__ = "0.1.0"
__author__ = "bivariate-lmm developers"

from bivariate_lmm.models import DesignSpec, FitResult, ModelSpec, StackedDataset

__all__ = ["__version__", "__author__", "DesignSpec", "FitResult", "ModelSpec", "StackedDataset"]
