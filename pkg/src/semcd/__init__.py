"""Semantic change detection: strategies, data pipeline, metrics and baselines."""
