"""Toy layout-conditioned diffusion transformer with regional rotary embeddings.

Submodules: ``numerics`` (autodiff and AdamW), ``rope``, ``dit``, ``losses``,
``layout``, ``synthetic``, ``trainer`` and ``cli``.
"""

__version__ = "0.1.0"
