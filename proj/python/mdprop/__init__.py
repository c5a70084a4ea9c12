"""Python access to the mdprop C++ library."""

import json

from ._mdprop import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    IndexError,
    MdpropError,
    Network,
    TargetSelectionError,
    git_blob_hash,
    load_network,
    make_synthetic,
    nmi,
    pi_ratio,
    recall_at_k,
    train,
)
from . import _mdprop


def evaluate(net, x, y, attack="none", eps=0.65, steps=20, targets=5, seed=0, ks=(1, 4)):
    """Clean or adversarial retrieval report as a dict."""
    return json.loads(_mdprop._evaluate(net, x, y, attack, eps, steps, targets, seed, list(ks)))


def run_benchmark(seeds=(0, 1, 2), steps=600, threads=0):
    """Desk benchmark; returns table CSV, aligned text and the parsed verdict."""
    csv, text, verdict = _mdprop._run_benchmark(list(seeds), steps, threads)
    return {"table_csv": csv, "table_text": text, "verdict": json.loads(verdict)}


__all__ = [
    "ConfigError", "DataError", "DimensionError", "FormatError", "IndexError", "MdpropError",
    "Network", "TargetSelectionError", "evaluate", "git_blob_hash", "load_network",
    "make_synthetic", "nmi", "pi_ratio", "recall_at_k", "run_benchmark", "train",
]
