"""One-step distillation of 2D diffusion / flow teachers through a learned Koopman operator."""

__version__ = "0.1.0"
