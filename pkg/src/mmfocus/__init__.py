"""Near-field mmWave SAR imaging with motion-error simulation and autofocus.

The package covers the full desk-scale pipeline: scatterer-level signal
simulation, multistatic-to-monostatic conversion, FFT-domain (RMA) and
direct-sum (BPA) reconstruction, trajectory-induced phase corruption,
a classical sparsity-driven autofocus, and an unfolded trainable variant
built on a small hand-rolled differentiable-operator layer.
"""

__version__ = "0.1.0"
