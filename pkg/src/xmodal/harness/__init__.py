"""Operational shell: configuration, data, checkpoints, training and the CLI."""
