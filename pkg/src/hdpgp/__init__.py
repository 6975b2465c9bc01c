"""Unsupervised traffic-scene analysis with HDP topic models and GP classifiers.

Motion words are learned into atomic activities (HDP) and temporal states
(HDP-HMM); Gaussian-process models trained on the learned representation
classify streaming clips and flag three kinds of anomalies.
"""

from hdpgp.errors import DataError, NumericalError

__version__ = "0.1.0"

__all__ = ["DataError", "NumericalError", "__version__"]
