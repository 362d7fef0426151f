"""Desk-scale laboratory for structure-preserving machine unlearning.

Subpackages, bottom-up:

* ``rng``        seeded splitmix64/xoshiro256** streams
* ``diffcore``   minimal taped reverse-mode tensors + finite-difference oracle
* ``datakit``    synthetic datasets, forget/retain splits, CSV format
* ``model``      extractor/projector/classifier family and pretraining
* ``anchor``     fixed per-class anchor vectors
* ``probe``      targeted-attack surrogate probe sets
* ``structloss`` structure matrices, alignment/regularization losses
* ``unlearn``    the structure-preserving unlearner and five baselines
* ``harness``    metrics, experiment orchestration, sweeps, CLI
"""

__version__ = "0.1.0"
