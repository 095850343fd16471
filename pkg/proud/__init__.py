# proud package: semi-supervised domain generalization laboratory
__version__ = "0.1.0"
