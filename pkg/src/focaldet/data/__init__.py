"""Synthetic scenes and the on-disk formats (JSON records, tensor files)."""
