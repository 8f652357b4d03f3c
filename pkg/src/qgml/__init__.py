# qgml: hybrid quasi-geostrophic model-error learning workbench
# This file makes Python treat the directory as a package.

# Version of the qgml package, recorded in every run manifest
__version__ = "0.3.0"
