"""Form Structure Parser Package"""
__version__ = "0.1.0"
__author__ = "Developer"
