"""Consistency-oriented pre-ranking lab: a synthetic ad cascade, a ranking
teacher, pre-ranking students trained with score- or rank-alignment
objectives, and consistency / system metrics."""

__version__ = "0.1.0"
