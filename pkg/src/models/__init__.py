"""Graph, token and network types."""
