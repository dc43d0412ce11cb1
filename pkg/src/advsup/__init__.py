"""Numerical lab comparing sole supervision with adversarially augmented supervision.

Modules: ``autodiff`` (tape-based reverse and forward mode), ``models``
(residual generator and critic), ``objectives``, ``estimators`` (measured
constants and bound certificates), ``experiments`` (paired training runs),
``config``/``report``/``cli`` (orchestration and artifacts).
"""

__version__ = "0.1.0"
