"""NMF-localized Gaussian-process regression of road segment speeds."""
