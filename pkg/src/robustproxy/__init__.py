"""Desk-scale adversarial-robustness toolkit: robust/non-robust channel
distillation, robust perturbations, class-wise robust perturbations, robust
proxies, proxy fine-tuning, and an attack/analysis battery."""

__version__ = "0.1.0"
