"""Distillation-based two-stage inference on synthetic long-tailed benchmarks.

Submodules: ``nn`` (MLP and training), ``datagen``, ``distill``, ``cascade``
(delegation), ``eval`` (metrics, sweeps, reports), ``config`` and ``cli``.
The kernel backend in use is ``cascade_distill._backend.BACKEND``.
"""

__version__ = "0.1.0"
