"""fusejepa: fusion-token multimodal JEPA training, probing and profiling on numpy."""

__version__ = "0.1.0"
