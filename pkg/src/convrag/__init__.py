"""One small decoder model serving both conversational retrieval and response generation."""

__version__ = "0.1.0"
