"""
netdeconv: deconvolución de redes con NumPy.
"""
__version__ = "0.1.0"
