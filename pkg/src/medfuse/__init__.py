"""Multimodal EHR fusion: masked lab-test pretraining, text-embedding
ingestion and a mutual-information-regularised fusion transformer."""

__version__ = "0.1.0"
