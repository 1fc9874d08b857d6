"""Sequence data, codec stand-in, end-to-end pipeline and command line."""
