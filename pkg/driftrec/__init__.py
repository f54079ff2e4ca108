"""
DRIFTREC
Streaming collaborative filtering with drifting latent factors: deep probabilistic
matrix factorization, Markov drift priors and coupled variational GRU chains
"""

__version__ = "0.1.0"
