"""Radio-visual localisation toolkit: scene synthesis, OFDM radar simulation,
cross-modal contrastive learning, self-labelling and baselines."""

__version__ = "0.1.0"
