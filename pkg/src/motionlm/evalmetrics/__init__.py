from .motion import FeatureExtractor, InsufficientSamplesError, diversity, fid, multimodality
from .text import CorpusStats, HashingEmbedder, LMTextEmbedder, bleu, cider, cider_corpus, embed_sim, rouge_l

__all__ = [
    "FeatureExtractor", "InsufficientSamplesError", "diversity", "fid", "multimodality",
    "CorpusStats", "HashingEmbedder", "LMTextEmbedder", "bleu", "cider", "cider_corpus", "embed_sim", "rouge_l",
]
