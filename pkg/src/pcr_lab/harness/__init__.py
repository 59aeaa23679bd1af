"""Experiment orchestration: tasks, config, training loop, testbeds, diagnostics, CLI."""
