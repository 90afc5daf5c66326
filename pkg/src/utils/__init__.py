"""Errors, seeded random streams and gradient checking."""
