"""Step-wise variational inference and gradient verification"""
