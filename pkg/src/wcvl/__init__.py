"""Cross-view metric learning with a pluggable auxiliary head, at desk scale."""

__version__ = "0.1.0"
