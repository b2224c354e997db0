"""Internal unit system and physical constants.

Everything inside the package is expressed in (eV, angstrom, fs).  Masses are
converted once, on load, to eV fs^2/A^2 so that P^2/2m is an energy and no
conversion factors appear in the propagation loop.  Momenta therefore carry
eV fs/A and velocities A/fs.
"""

# CODATA 2018
_AMU_KG = 1.66053906660e-27
_EV_J = 1.602176634e-19

#: hbar in eV fs
HBAR = 0.6582119569

#: multiply a mass in amu by this to get eV fs^2/A^2
AMU = _AMU_KG / (_EV_J * 1e-30 / 1e-20)

#: Boltzmann constant in eV/K
KB = 8.617333262e-5

#: bohr radius in angstrom
BOHR = 0.529177210903


def beta_from_temperature(temperature_k):
    """Inverse temperature (1/eV) for a temperature in kelvin."""
    return 1.0 / (KB * temperature_k)
