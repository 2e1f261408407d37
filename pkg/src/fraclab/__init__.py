"""Multi-fidelity fracture prediction workbench.

Data generation (rule-based surrogate + phase-field solver), a mesh-agnostic
encoder-decoder model with textual input-deck conditioning, and the
curriculum / fine-tuning training pipeline, at desk scale.
"""

__version__ = "0.1.0"
