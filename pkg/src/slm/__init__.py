"""Sentence-level pretraining at desk scale.

Subpackages are organized around the data path: text goes through
``textpipe`` (segment, vocab, pack), ``masking`` and ``shuffling``
produce training views, ``encoder``/``reconstructor``/``objectives``
compute the joint loss on the ``tensor`` autodiff engine, and
``trainer`` runs the loop. ``heads`` and ``probe`` consume trained
checkpoints. ``cli`` is the one entry point.
"""

__version__ = "0.1.0"
