"""In-bed body mesh recovery from overhead depth images.

A conditional diffusion model over body-model parameters, pretrained on
procedurally generated synthetic depth data and fine-tuned on (pseudo-)real
data, plus the evaluation and experiment harness around it.
"""

__version__ = "0.1.0"
