"""invgfx: desk-scale inverse graphics.

A small reverse-mode autodiff engine, parameter-free differentiable
renderers (camera projection, rigid warps, downsampling, masking), and
training loops that pair reconstruction losses with adversarial priors on
the predicted latent factors.
"""

__version__ = "0.1.0"
