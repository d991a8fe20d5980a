"""
Applications pour GeoAdapt.
"""
