"""Desk-scale personalization pipeline for task-oriented dialog systems.

Three training phases on top of a from-scratch numpy autodiff substrate:
supervised task training of a small decoder-only LM, unsupervised
personalization with PPO guided by a contrastive profile-compatibility
reward and a KL anchor, and optional few-shot fine-tuning, plus corpus
tooling and an F1/BLEU/ROUGE evaluation harness.
"""

__version__ = "0.1.0"
