"""Anchors the pytest rootdir so components and config import from the repository root"""
