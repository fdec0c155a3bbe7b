"""Two-stage weakly-supervised gigapixel slide classification on a numpy autograd core."""

__version__ = "0.1.0"
