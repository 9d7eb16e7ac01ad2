"""Desk-scale evaluation of anti-personalization defenses under purification.

The pipeline: adversarially perturb a small set of portrait images so that
personalization fine-tuning fails (the defense), optionally purify the
perturbed images (filter cascade or diffusion-based purification), fine-tune
a toy conditional diffusion model on the result, and measure how much of the
subject's identity the fine-tuned model still reproduces.

All images are H×W×C float arrays with values in [0, 1].
"""

__version__ = "0.1.0"
