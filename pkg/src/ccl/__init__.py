"""Contrastive curriculum fine-tuning for building-energy forecasters.

Real windows are scored by a frozen forecaster's CV-RMSE, simulated windows
inherit the score of their nearest real window in a contrastively trained
embedding space, and fine-tuning visits the pool from easy to hard.
"""

__version__ = "0.1.0"
