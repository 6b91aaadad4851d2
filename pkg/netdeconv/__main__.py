"""
Permite `python -m netdeconv <subcomando>`.
"""
from netdeconv.main import main

main()
