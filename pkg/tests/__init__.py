"""Tests for bivariate-lmm."""
