"""
Tests for gt-conformal.
"""
