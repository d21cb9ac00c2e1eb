"""Time-aware, knowledge-enriched mortality risk modeling for longitudinal EHR windows."""

__version__ = "0.1.0"
