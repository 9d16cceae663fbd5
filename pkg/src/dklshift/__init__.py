"""Deep kernel learning under temporal shift: recurrent feature extractors
with a variational GP classification head, a synthetic shifted-cohort
generator, and the calibration-centric evaluation battery."""

__version__ = "0.1.0"
