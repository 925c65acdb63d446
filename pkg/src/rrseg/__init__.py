"""rrseg: redundancy-reduction training and confidence ensembling for 3D
semantic segmentation, built on a self-contained CPU autodiff core.

Heavy submodules are imported on demand so the command-line entry point can
configure thread limits before numpy loads.
"""

__version__ = "0.1.0"
