"""Adversarial-input detection with Fisher-information scores.

Modules: :mod:`nn` (network engine), :mod:`train`, :mod:`attack`,
:mod:`fisher` (scores and FIS maps), :mod:`oracle` (brute-force
references), :mod:`evaluation` (ROC/AUC), :mod:`data` (file formats) and
:mod:`cli`.
"""

__version__ = "0.1.0"
