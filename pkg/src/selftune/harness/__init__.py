"""Experiment harness: datasets, configs, orchestration and the CLI.

``cli`` is deliberately not imported here: the console entry point loads
it directly, and ``python -m selftune.harness.cli`` would otherwise see
the module pre-imported.
"""

from . import config, datasets, experiment

__all__ = ["cli", "config", "datasets", "experiment"]
