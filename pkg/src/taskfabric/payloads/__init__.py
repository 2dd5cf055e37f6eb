"""Bundled example payloads."""
