"""Task embeddings from the Fisher information of a probe network.

Submodules: ``numerics``, ``tasks``, ``probes``, ``fisher``, ``distances``,
``model2vec``, ``meta`` and ``cli``.
"""

__version__ = "0.1.0"
