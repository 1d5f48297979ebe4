"""Vector-quantized joint text/speech latent space and a three-step voice
cloning pipeline, at toy scale, on a hand-written autodiff engine."""

__version__ = "0.1.0"
