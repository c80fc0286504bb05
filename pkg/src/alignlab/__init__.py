"""Desk-scale laboratory for preference optimization with selective
sharpness-aware updates.

The package is organized bottom-up:

- ``tensor``      reverse-mode autodiff over float64 numpy arrays
- ``params``      named parameter store with a flat coordinate id space
- ``gradcheck``   finite-difference gradient oracle
- ``model``       small causal transformer built on the autodiff core
- ``checkpoint``  versioned binary checkpoint format
- ``data``        synthetic token-level safety task with a programmatic oracle
- ``probe``       linear safety probe, neuron scoring, subspace masks
- ``losses``      preference losses (DPO family, IPO, reward-level BCE)
- ``sam``         selective two-pass sharpness-aware optimizer
- ``geometry``    curvature and worst-case-perturbation diagnostics
- ``harness``     experiment pipeline (data -> sft -> probe -> train -> eval)
- ``cli``         command line entry points
"""

__version__ = "0.1.0"
