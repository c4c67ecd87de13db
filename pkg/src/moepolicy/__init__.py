"""Language-conditioned mixture-of-experts diffusion policy, desk scale.

A small, fully deterministic float64 stack: a recorded-graph autodiff
engine, a vision-language encoder over image patches, a conditional
denoising transformer with a gated bank of mixture-density experts,
DDIM sampling, min-norm gradient modulation for the shared parameters,
and a synthetic multi-task pick-and-place benchmark driving it all.
"""

__version__ = "0.1.0"
