"""From-scratch ResNet-20 training and representational similarity scoring against brain RDMs."""

__version__ = "0.1.0"
