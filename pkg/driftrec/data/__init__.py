"""Rating logs, run configuration and synthetic streams"""
