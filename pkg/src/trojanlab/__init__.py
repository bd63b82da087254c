"""
trojanlab
=========

A desk-scale laboratory for action-level backdoor attacks on
return-conditioned trajectory models: synthetic control tasks, offline
datasets, a small autodiff engine, attention and convolution trajectory
models, the attacks and their evaluation.
"""

__version__ = '0.1.0'
