"""Next-POI recommendation with K parallel spatiotemporally decayed sub-states.

Subpackages by pipeline stage: ``ingest`` (parsing, cleaning, splits),
``encoding`` (per-step inputs), ``dynamics`` (sub-state recurrences and
aggregation), ``objective`` (losses), ``training`` (BPTT, Adam, early
stopping), ``evaluation`` (full ranking, metrics, statistics) and ``cli``.
"""

__version__ = "0.1.0"
