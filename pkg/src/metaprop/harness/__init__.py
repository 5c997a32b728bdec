"""CLI harness: configuration, persistence, figures, and orchestration."""
