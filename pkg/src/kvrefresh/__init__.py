"""kvrefresh: a desk-scale decoding engine for KV-cache policies.

The engine runs a small deterministic decoder-only transformer and lets a
cache policy decide, per layer and per step, which cached key/value
entries the current token attends to. Implemented policies: vanilla full
attention, sink+recency streaming, cumulative-score heavy hitters (h2o),
prompt-time top-K selection (snapkv), and full/partial alternation with
periodic partial-cache refresh (refreshkv) plus its two ablations.
"""

from .errors import ConfigurationError, ContractViolation

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "ContractViolation", "__version__"]
