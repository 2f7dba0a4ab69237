"""Heteroscedastic regression with a neural SDE hidden block."""
