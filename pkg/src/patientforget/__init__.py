"""Patient-wise machine unlearning by Fisher-weighted weight perturbation."""

__version__ = "0.1.0"
