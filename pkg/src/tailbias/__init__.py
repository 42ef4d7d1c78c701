"""Prior-bias resistance training for long-tailed relation classification.

Subpackages: annotation statistics (``stats``), bias construction (``bias``),
losses with analytic gradients (``losses``), dense kernels and the gradient
checker (``numerics``), the relation classifiers (``model``), synthetic data
(``synth``), ranking metrics (``metrics``), and the training/eval harness
(``harness``). The ``tailbias`` command line fronts the harness.
"""

__version__ = "0.1.0"
