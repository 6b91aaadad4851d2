"""
Servicios de netdeconv: álgebra lineal, parches, blanqueo, capas,
entrenamiento, datos y experimentos.
"""
