"""Open-vocabulary semantic segmentation from image-caption supervision:
group-token visual encoding, entity-driven corpus filtering, three weakly
supervised objectives, and zero-shot mask inference."""

__version__ = "0.1.0"
