"""
Tests pour GeoAdapt.
"""
