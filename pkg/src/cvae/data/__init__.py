"""Bundled UCI tables (gzip CSV)."""
