"""Gradient refinement of text-prompt embeddings through a frozen toy transformer."""

from .engine import PromptEmbedding, TrainConfig, TrainingExample, init_prompt, optimize
from .inference import GenerationTrace, evaluate, generate
from .model import ModelCheckpoint, ModelConfig, Vocabulary, load_checkpoint, save_checkpoint

__all__ = [
    "GenerationTrace",
    "ModelCheckpoint",
    "ModelConfig",
    "PromptEmbedding",
    "TrainConfig",
    "TrainingExample",
    "Vocabulary",
    "evaluate",
    "generate",
    "init_prompt",
    "load_checkpoint",
    "optimize",
    "save_checkpoint",
]
