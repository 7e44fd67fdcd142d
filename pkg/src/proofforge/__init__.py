"""Dafny proof synthesis by loop lifting and lemma-tree search."""

__version__ = "0.1.0"
