"""Dense numerics, gradient checking, optimizers and Gaussian primitives"""
