"""tbeval - TB screening evaluation of a chest X-ray model against reader panels"""

__version__ = "0.1.0"
__author__ = "tbeval maintainers"
