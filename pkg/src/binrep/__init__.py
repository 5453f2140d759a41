"""Binary representation learning with adjustable bounded rectifiers and a
bit-packed popcount inference engine."""

__version__ = "0.1.0"
