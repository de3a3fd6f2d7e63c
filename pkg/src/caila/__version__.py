__author__ = "CAILA-Desk contributors"
__version__ = "0.3.0"
