"""
In-tree models: k-nearest-neighbor probabilities and local outlier factor scores.
"""
