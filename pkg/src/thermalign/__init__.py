"""Projector-only alignment of a frozen toy vision-language model to synthetic thermal drone scenes.

Submodules map to pipeline stages: ``scenegen`` renders scenes, ``dataset`` builds
ShareGPT-style splits, ``model``/``train`` hold the toy VLM and its alignment loop,
``evalkit`` parses responses and scores them, ``backends`` serve inference locally or
over an OpenAI-compatible endpoint, and ``cli`` wires everything into ``thermalign``.
"""
from .backends import BatchResult, InferenceRequest, LocalBackend, RemoteBackend, RemoteConfig, batch_infer
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig, load_config
from .dataset import AnnotationRecord, ConversationExample, Dataset, balance_classes, build_dataset, split_dataset
from .errors import ThermalignError
from .evalkit import (
    EvalItem,
    EvaluationResult,
    Prediction,
    enumeration_metrics,
    evaluate,
    parse_habitat,
    parse_species_count,
    recognition_metrics,
    render_prompt,
)
from .model import ModelConfig, PartitionReport, ToyVLM, parameter_partition
from .scenegen import SPECIES, CorpusConfig, SceneSpec, SyntheticScene, generate_corpus, generate_scene, render_glyph
from .tokenizer import Vocabulary
from .train import LossCurve, TrainConfig, lr_at, select_checkpoint, smooth, train_projector

__version__ = "0.1.0"

__all__ = [
    "AnnotationRecord",
    "BatchResult",
    "ConversationExample",
    "CorpusConfig",
    "Dataset",
    "EvalItem",
    "EvaluationResult",
    "InferenceRequest",
    "LocalBackend",
    "LossCurve",
    "ModelConfig",
    "PartitionReport",
    "PipelineConfig",
    "Prediction",
    "RemoteBackend",
    "RemoteConfig",
    "SPECIES",
    "SceneSpec",
    "SyntheticScene",
    "ThermalignError",
    "ToyVLM",
    "TrainConfig",
    "Vocabulary",
    "balance_classes",
    "batch_infer",
    "build_dataset",
    "enumeration_metrics",
    "evaluate",
    "generate_corpus",
    "generate_scene",
    "load_checkpoint",
    "load_config",
    "lr_at",
    "parameter_partition",
    "parse_habitat",
    "parse_species_count",
    "recognition_metrics",
    "render_glyph",
    "render_prompt",
    "save_checkpoint",
    "select_checkpoint",
    "smooth",
    "split_dataset",
    "train_projector",
]
