"""Registration of histopathology slices to MRI with a two-stage matching network."""

__version__ = "0.1.0"
