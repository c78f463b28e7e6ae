"""Latent flow-matching text-to-speech at desk scale.

A waveform VAE compresses 24 kHz audio to a low frame-rate latent; a DiT
velocity network trained with conditional flow matching generates those
latents from text and an audio prompt; an Euler sampler with context
overwriting and projection guidance turns noise into speech latents.

Modules: :mod:`signalio`, :mod:`spectral`, :mod:`wavvae`, :mod:`textcond`,
:mod:`dit`, :mod:`flowmatch`, :mod:`sampler`, plus the harness
(:mod:`config`, :mod:`checkpoint`, :mod:`optim`, :mod:`train`,
:mod:`evaluate`, :mod:`cli`).
"""

__version__ = "0.1.0"
