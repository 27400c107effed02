"""Knowledge-graph embedding with cache-based negative sampling."""

__version__ = "0.1.0"
