"""
Conformal Good-Turing classification package.
"""
