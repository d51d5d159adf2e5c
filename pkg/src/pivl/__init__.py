"""Part-informed visual-language learning for person re-identification,
self-contained at desk scale: synthetic parsing-annotated data, two-stage
prompt tuning + encoder training, hierarchical fusion alignment, and a
retrieval/consistency evaluation harness."""

__version__ = "0.1.0"
