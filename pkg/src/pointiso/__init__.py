"""Peptide feature detection in LC-MS maps: point-cloud segmentation of scan windows
followed by isotope-sequence grouping."""

__version__ = "0.1.0"
