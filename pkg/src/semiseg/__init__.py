"""Self- and semi-supervised segmentation of synthetic pelvic phantoms with a numpy autodiff kit."""

__version__ = "0.1.0"
