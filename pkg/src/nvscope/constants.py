"""Physical constants used across the simulation and analysis code.

Single source of truth: every module imports from here, nothing redefines
a constant locally. SI units throughout.
"""

# Exact SI defining constants (2019 redefinition)
K_B = 1.380649e-23          # Boltzmann constant, J/K
H_PLANCK = 6.62607015e-34   # Planck constant, J*s

# CODATA 2018
MU_B = 9.2740100783e-24     # Bohr magneton, J/T
MU_0 = 1.25663706212e-6     # vacuum permeability, N/A^2

# Electron-spin g-factor (magnitude). The NV gyromagnetic ratio used for
# frequency <-> field conversion is derived from it, ~28.025 GHz/T.
G_FACTOR = 2.00231930436256

# NV gyromagnetic ratio, Hz/T
GAMMA_NV = G_FACTOR * MU_B / H_PLANCK

# NV ground-state zero-field splitting, Hz
D_ZFS = 2.87e9

# 2*sqrt(2*ln 2): FWHM of a Gaussian in units of its standard deviation
FWHM_PER_SIGMA = 2.3548200450309493
