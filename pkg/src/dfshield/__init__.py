"""Data-free adversarial robustness on a small numpy autodiff core.

Modules: ``tensorcore`` (tensors and reverse-mode AD), ``model`` (BN networks
and checkpoints), ``data`` (toy datasets), ``synth`` (surrogate sample
synthesis), ``attack`` (PGD), ``train`` (robust training with gradient
refinement), ``evaluation`` (accuracy, diversity metrics, loss surfaces) and
``cli``.
"""
__version__ = "0.1.0"
