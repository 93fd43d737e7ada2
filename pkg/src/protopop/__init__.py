"""protopop: prototype-augmented, dual-grained-prompt popularity prediction.

The pipeline has two halves. The alignment half learns prompt contexts,
projections and attention parameters by classifying posts into fine-grained
categories against frozen multimodal prototypes. The regression half feeds
the aligned features (plus hand-crafted user statistics) into boosted
regression trees and fuses two tree configurations on a validation split.
"""

__version__ = "0.1.0"
