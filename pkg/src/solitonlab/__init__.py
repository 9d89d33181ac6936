"""solitonlab: desk-scale toolkit for normalized shrinking Ricci solitons.

Closed-form model geometries with exact rational spectra, discretized
tensor calculus on tori and two-chart spheres, the entropy functional and
its Euler-Lagrange residual with linearization, deformation-space kernels,
rigidity decision procedures, and exact SU(n+1) weight combinatorics.
"""

__version__ = "0.1.0"
