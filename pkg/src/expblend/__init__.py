"""Online continual learning with replay memory, self-attention refined
differentially private features (SBD), and two-branch parameter blending.

The numeric core is a small numpy autograd in :mod:`expblend.tensor`; the
network, memories, stream splitter, trainer and evaluation build on it.
"""

__version__ = "0.1.0"
