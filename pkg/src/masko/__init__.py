"""masko: learned sparse binary pixel masks for image reconstruction.

The package trains a relaxed distribution over binary pixel masks jointly
with a reconstruction decoder, then collapses the distribution to
deterministic top-K masks for evaluation.
"""

__version__ = "0.1.0"
