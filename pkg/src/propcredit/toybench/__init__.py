"""Desk-scale experiment harness: toy data, pretraining, RL fine-tuning, comparisons."""
