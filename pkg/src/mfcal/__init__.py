"""Multi-fidelity Gaussian-process calibration of simulator inputs.

Low and high fidelity runs are reduced to EOF coefficients, each coefficient
is modelled as a Gaussian process over the inputs, and the inputs are
inferred from noisy field observations by Metropolis-Hastings on the
reduced likelihood.  Expected improvement picks further runs.
"""

__version__ = "0.1.0"
