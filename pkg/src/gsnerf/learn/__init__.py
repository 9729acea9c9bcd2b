"""Losses, parameter store and optimizer, view selection, and the training loop."""
