# snowfuse: snow coverage grading and Cross Fusion necks
__version__ = "1.0.0"
