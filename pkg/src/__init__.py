"""
SuperLoRA - grouped, reshaped, factorized and projected low-rank adaptation.
A numerical library and CLI for building, counting, training and analyzing weight updates.
"""

__version__ = "1.0.0"
