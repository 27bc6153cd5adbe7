"""Holistic inference-attack risk assessment for image classifiers."""
