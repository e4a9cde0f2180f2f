"""Multimodal semantic-ID tokenizers with behavior-aware fine-tuning."""

import json

from ._core import (
    ConfigError,
    FormatError,
    IoError,
    NumericError,
    ShapeError,
    Tokenizer,
    auc,
    baseline_ids,
    codebook_utilization,
    config_hash,
    default_tokenizer_config,
    gauc,
    gen_synthetic,
    kmeans,
    ndcg_at_n,
    read_embeddings,
    recall_at_n,
    soft_indices,
    token_entropy,
    validate_tokenizer_config,
    write_embeddings,
)
from . import _core


def tokenizer_config(**overrides):
    """Default tokenizer config as a dict with `overrides` applied."""
    cfg = json.loads(default_tokenizer_config())
    cfg.update(overrides)
    return json.loads(validate_tokenizer_config(json.dumps(cfg)))


def make_tokenizer(**overrides):
    return Tokenizer(json.dumps(tokenizer_config(**overrides)))


def run_experiment(config, output_dir=None):
    """Runs an experiment from a dict or JSON string and returns parsed metrics reports."""
    text = config if isinstance(config, str) else json.dumps(config)
    return [json.loads(r) for r in _core.run_experiment(text, None if output_dir is None else str(output_dir))]


__all__ = [
    "ConfigError",
    "FormatError",
    "IoError",
    "NumericError",
    "ShapeError",
    "Tokenizer",
    "auc",
    "baseline_ids",
    "codebook_utilization",
    "config_hash",
    "gauc",
    "gen_synthetic",
    "kmeans",
    "make_tokenizer",
    "ndcg_at_n",
    "read_embeddings",
    "recall_at_n",
    "run_experiment",
    "soft_indices",
    "token_entropy",
    "tokenizer_config",
    "write_embeddings",
]
