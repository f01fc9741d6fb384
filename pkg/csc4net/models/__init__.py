"""Array value types and trained-model state."""
