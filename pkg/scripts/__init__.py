# Polarimetric Height Scripts
"""
Photo-polarimetric surface height reconstruction: optics, synthetic scenes,
polarisation decomposition, constraint assembly, sparse solving, light and
albedo estimation.
"""
