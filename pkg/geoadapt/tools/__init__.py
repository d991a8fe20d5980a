"""
Outils et utilitaires pour GeoAdapt.
"""
