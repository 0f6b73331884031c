"""Semi-supervised segmentation with two co-trained UNets and a pixel-wise critic."""
__version__ = "0.1.0"
