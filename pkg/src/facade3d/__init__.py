"""Facade windows from street-level panoramas to a thermal model."""
