"""
Services of the data-driven predictive control lab.
"""
