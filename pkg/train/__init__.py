"""Experiment harness: configs, training loop, telemetry, tracking and CLI."""
