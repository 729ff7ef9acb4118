"""Engagement telemetry simulation, estimators, and salience-embedding analysis.

The package is organised around one pipeline:

  telemetry  -> synthetic (or ingested) per-session player traces
  features   -> model-ready behaviour/environment inputs and targets
  neural     -> a small deterministic float64 numeric core with exact gradients
  models     -> three estimators of future-interaction intensity
  tuning     -> Hyperband search over architecture/optimizer knobs
  analysis   -> projection, partitioning, and profiling of learned embeddings
  cli        -> end-to-end orchestration and report artifacts
"""

__version__ = "0.1.0"
