"""Task-agnostic federated masked-image-modeling simulator.

Numpy autodiff core with a compiled kernel backend, a small ViT masked
autoencoder, FedAvg over simulated clients, LoRA fine-tuning heads,
a procedural retina-like corpus and evaluation/reporting.
"""

__version__ = "0.1.0"

from fedmim.kernels import BACKEND  # noqa: E402,F401
