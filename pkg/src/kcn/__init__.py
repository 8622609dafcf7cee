"""Knowledge-guided convolutional networks for chemical-disease relation extraction."""

__version__ = "0.1.0"
