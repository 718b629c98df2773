"""Fidelity-kernel SVMs for the phases of the transverse-field Ising chain.

Modules
-------
ising       Bogoliubov angles, fidelity, fidelity per site, ED oracle
kernel      Gram matrices, centering, kernel-target alignment
svm         SMO dual solver and the signed distance to the hyperplane
scaling     zero crossings, fidelity-derivative peaks, ``J_c + a N^-nu`` fit
experiment  grids, training protocols and the end-to-end pipeline
cli         ``qkphase`` command line
"""

__version__ = "0.1.0"
