"""
Data-driven predictive control laboratory: structured ARX predictors, local sensitivity
analysis and sensitivity-shaped kernel identification.
"""
__version__ = '1.0.0'
