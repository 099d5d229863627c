"""Visual summaries of what an image classifier relies on for a class."""
__version__ = "0.1.0"
