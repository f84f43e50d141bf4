"""Multilingual conversational specialization for task-oriented dialog, at desk scale.

Dialog corpora and ontologies, parallel subtitle ingestion, a subword
tokenizer, MLM/TLM/response-selection instance generation, a small numpy
transformer encoder, DST/RR/agreement metrics, and a zero-/few-shot
experiment runner.
"""

__version__ = "0.1.0"
