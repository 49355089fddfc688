"""Database migrations for the stage cache."""

from .runner import run_migrations

__all__ = ["run_migrations"]
