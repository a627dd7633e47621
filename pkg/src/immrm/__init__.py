"""Covariate-adjusted estimation for longitudinal randomized trials."""
