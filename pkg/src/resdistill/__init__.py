"""resdistill: entropy-guided dataset distillation for image restoration at desk scale.

Pipeline: synthesize a paired degraded/clean corpus, score image complexity,
select a top-p subset, align its distribution to the full corpus (adjuster CNN
and optional latent synthesis), train a tiny restoration model, and report
metrics plus distribution diagnostics.
"""

__version__ = "0.1.0"
