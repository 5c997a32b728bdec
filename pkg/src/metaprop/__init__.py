"""Transductive meta-learning with task-conditioned label propagation.

Labels diffuse from a labeled support set to the unlabeled query set over a
similarity graph whose construction network is modulated per task; the
pseudo-labeled union then drives MAML-style bi-level adaptation.
"""

__version__ = "0.1.0"
