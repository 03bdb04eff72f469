"""Unbiased accidental-click filtering for streaming CTR models."""
