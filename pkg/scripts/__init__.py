"""Offline helpers over exported run directories (plots, export validation).

Importable as a package so the tests can exercise the helpers directly.
"""
