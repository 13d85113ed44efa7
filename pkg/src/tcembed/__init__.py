"""Toy text-embedding distillation with token compression."""

__version__ = "0.1.0"
