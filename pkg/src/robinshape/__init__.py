"""Robin inclusion reconstruction by shape optimization on annular meshes."""

__version__ = "0.1.0"
