"""Offline embedding exporter.

Feeds a dataset manifest through a frozen image/text encoder and writes the
three PEMB interchange files (image global, text global, text tokens) that
the regression pipeline ingests. The PEMB byte format and the JSONL
manifest are the only contracts shared with the consumer.
"""

__version__ = "0.1.0"
