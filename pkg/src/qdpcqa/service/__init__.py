"""HTTP front end over the core package; the CLI talks to it."""
from .app import create_app

__all__ = ["create_app"]
