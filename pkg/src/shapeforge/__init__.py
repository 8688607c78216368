"""Edge-map and patch-shuffle superposition augmentation, with a desk-scale
shape/texture benchmark for measuring what a small classifier relies on."""

__version__ = "0.1.0"
