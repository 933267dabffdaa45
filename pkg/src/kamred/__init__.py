"""kamred: numerical reducibility laboratory for forced 1-D oscillators.

Subpackages follow the processing pipeline: ``basis_spectra`` builds the
unperturbed spectral frame, ``symbolcalc`` runs the classical symbol
machinery, ``diophantine`` handles frequency sets and measure estimates,
``kamcore`` performs the quadratic reduction, ``propagator`` verifies the
dynamics, and ``cli_report`` is the batch front door (CLI: ``kamred``).
"""

__version__ = "0.1.0"
