"""Pipeline stages: data files, spectral encoding, Hop2Token, training, model storage."""
