"""Single-shot density matrix embedding + VQE toolkit for the Hubbard model."""

__version__ = "0.1.0"
