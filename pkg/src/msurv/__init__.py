"""Exchangeable Markov multi-state survival processes."""
