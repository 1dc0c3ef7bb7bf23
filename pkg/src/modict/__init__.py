"""Multimodal in-context tuning (ModICT) for product description generation."""

from .corpus import AttributeDictionaries, Sample
from .decoding import GenConfig, generate
from .incontext import EncodedBatch, FeatureTransformer, InContextInstance, Reference, Tokenizer
from .metrics import MetricsReport
from .model import DeepPromptAdapter, ModelConfig, ModICTModel
from .peft import FreezePlan, apply_freeze_plan, build_model, get_plan
from .retrieval import ImageEncoding, RetrievalIndex
from .trainer import TrainConfig

__version__ = "0.1.0"
