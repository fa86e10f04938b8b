"""Desk-scale cross-lingual alignment training on synthetic bilingual corpora."""

__version__ = "0.1.0"
