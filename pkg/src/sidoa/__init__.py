"""Signal-informed direction-of-arrival estimation with GCC-PHAT feature maps.

Modules
-------
signal    framing, spectra, audio I/O and resampling
room      shoebox image-source simulator, array geometry, scenes and rendering
features  GCC-PHAT maps, external-mic masks, alignment, feature records
nn        the small CNN classifier, Adam, model files
corpus    corpus loading and a synthetic talker
pipeline  training data, training loop, evaluation and benchmarks
cli       the ``sidoa`` command
"""

__version__ = "0.1.0"
