"""Entropic autoencoders: encoder ensembles sampled at temperature T, decoders
trained on the ensemble-averaged gradient.

Submodules: ``autodiff`` (flat-parameter MLPs), ``networks`` (models and
losses), ``sampler`` (Nose-Hoover chain), ``training``, ``dynamics``,
``diagnostics``, ``datasets``, ``config``, ``verify`` and ``cli``.
"""

__version__ = "0.1.0"
