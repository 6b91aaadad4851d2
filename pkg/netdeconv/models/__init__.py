"""
Modelos de datos de netdeconv.
"""
