__version__ = "0.1.0"

SUBSAMPLE_FACTOR = 8
LINE_HEIGHT = 40
