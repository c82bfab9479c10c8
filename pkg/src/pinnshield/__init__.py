"""Physics-informed neural network virtual sensors for attack mitigation in a cylinder-wake flow loop."""

__version__ = "0.1.0"
