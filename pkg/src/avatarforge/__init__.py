"""Score-distillation optimisation of neural signed-distance avatars."""
__version__ = "0.1.0"
