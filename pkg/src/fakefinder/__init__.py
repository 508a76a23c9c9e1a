"""fakefinder: a small from-scratch ViT real/fake image classifier.

Subpackages are deliberately flat: ``tensor`` (autodiff engine),
``vit`` (model), ``augment`` (deterministic image pipeline), ``data``
(manifests and the synthetic corpus), ``metrics``, ``checkpoint``,
``train`` and ``cli``.
"""

__version__ = "0.1.0"
