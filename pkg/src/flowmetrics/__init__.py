"""Narrative-flow metrics over LM log-probabilities, linguistic feature
extraction, and ordinal-regression validation against human trait scores."""

from .corpus import (
    Dataset,
    DatasetSchema,
    EssayRecord,
    LoadReport,
    PromptSpec,
    TraitScale,
    load_dataset,
    load_prompts,
)
from .features import FeatureVector, LinguisticFeatureExtractor, extract_features, tokenize_words
from .mocklm import MockBigramModel, TableBigramLM, UniformLM, mock_model
from .ordinal import OrderedLogit
from .scoring import (
    CachingBackend,
    HttpCompletionsBackend,
    LmEndpointConfig,
    ResponseCache,
    ScoredText,
    TokenLogprob,
    assign_tokens_to_span,
    score_target,
)
from .segmentation import segment_sentences
from .sequentiality import (
    EssaySequentiality,
    SentenceSequentiality,
    essay_sequentiality,
    score_dataset,
    sentence_nll_context,
    sentence_nll_topic,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DatasetSchema",
    "EssayRecord",
    "LoadReport",
    "PromptSpec",
    "TraitScale",
    "load_dataset",
    "load_prompts",
    "FeatureVector",
    "LinguisticFeatureExtractor",
    "extract_features",
    "tokenize_words",
    "MockBigramModel",
    "TableBigramLM",
    "UniformLM",
    "mock_model",
    "OrderedLogit",
    "CachingBackend",
    "HttpCompletionsBackend",
    "LmEndpointConfig",
    "ResponseCache",
    "ScoredText",
    "TokenLogprob",
    "assign_tokens_to_span",
    "score_target",
    "segment_sentences",
    "EssaySequentiality",
    "SentenceSequentiality",
    "essay_sequentiality",
    "score_dataset",
    "sentence_nll_context",
    "sentence_nll_topic",
]
