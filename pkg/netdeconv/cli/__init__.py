"""
Línea de comandos de netdeconv.
"""
