"""Hop-token graph transformer for node classification."""
