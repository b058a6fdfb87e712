"""Desk-scale self-supervised speech modeling with domain adaptation by model surgery.

The package trains a miniature convolutional + transformer speech model
on synthetic formant audio, finetunes it with CTC on a source domain,
continually pretrains the feature encoder on mixed source+target audio,
and recombines components so the adapted encoder serves the finetuned
recognizer. Everything runs on CPU in double precision.
"""

__version__ = "0.1.0"
