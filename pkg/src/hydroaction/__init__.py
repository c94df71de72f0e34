"""Path-space actions of zero-range and exclusion lattice gases and of their hydrodynamic equations."""
