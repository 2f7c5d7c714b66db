"""Learning Groebner bases with hierarchical attention transformers.

Modules: ``ffpoly`` (prime-field polynomials), ``groebner`` (Buchberger
oracle), ``datagen`` (backward generation), ``tokenizer``, ``tensor``,
``hatlayer`` (hierarchical attention), ``model``, ``training`` and ``cli``.
"""

__version__ = "0.1.0"
