"""Identification of diffusion coefficients in elliptic problems and of ODE dynamics.

Modules: mesh, fem (P1 solver and quadrature), nn (tanh networks with exact
derivatives), synth (manufactured problems and noisy data), recon_fem,
recon_nn (hybrid, mixed least squares, PINN), lmm (multistep discovery),
study (rate experiments) and cli.
"""
__version__ = "0.1.0"
