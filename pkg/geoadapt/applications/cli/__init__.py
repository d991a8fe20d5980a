"""
Interface en ligne de commande pour GeoAdapt.
"""
