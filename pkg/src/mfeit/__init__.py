"""Multifrequency electrical impedance tomography with group sparse reconstruction.

Modules
-------
mesh        triangular meshes of the disk and ellipses, electrode placement
forward     P1 finite elements for the continuum and complete electrode models
linearize   sensitivity matrix and multifrequency data
spectral    spectral matrix, decoupling, difference imaging, polynomial moments
recon       group iterative soft thresholding
phantom     example phantoms, noisy sweeps and recovery metrics
experiment  config-driven runs and the mesh/noise/regularization study
cli         command line entry point
"""

__version__ = "0.1.0"
