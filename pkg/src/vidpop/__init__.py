"""Short-video engagement prediction pipeline.

Submodules: ingest (bundle IO + synthetic data), features (feature
engineering), gbdt (boosted trees), fusion (multi-branch net), evaluate
(metrics/ensembling/exports), ablate (source-subset grid), cli.
"""

__version__ = "0.1.0"
