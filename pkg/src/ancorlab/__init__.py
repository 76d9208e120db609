"""Coarse-to-fine few-shot learning lab.

Trains an encoder on coarse labels with a class-anchored angular contrastive
regularizer, evaluates it on fine sub-classes with episodic few-shot tests,
and ships the baseline presets and combinators needed to compare approaches.
"""

__version__ = "0.1.0"
