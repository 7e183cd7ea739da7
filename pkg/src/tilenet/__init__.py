"""tilenet: a cycle-level model of a tiled, NoC-based network stack.

Protocol layers, network functions and applications each live on their own
tile of a 2D mesh and pass packets between one another as NoC messages.
"""

__version__ = "0.1.0"
