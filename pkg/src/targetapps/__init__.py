"""Target app selection and next-app recommendation toolkit."""

__version__ = "0.1.0"
