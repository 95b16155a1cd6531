"""Sample-efficiency experiments for transfer learning on diagram images, in plain numpy."""

__version__ = "0.1.0"
