"""Multimodal dialogue response retrieval - DR, SDR and MDR integration regimes."""

__version__ = "0.1.0"
