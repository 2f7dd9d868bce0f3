"""Joint VIS-IR-Label triplet generation with scene-balanced sampling, on a procedural corpus."""

__version__ = "0.1.0"
