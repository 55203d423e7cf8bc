"""Cosine zero-shot classification against a quantized prototype table.

A query embedding (float path or integer path) is truncated to the active
prefix, re-normalized, and scored against every dequantized class prototype.
The margin helpers translate quantization noise into a cosine-margin
threshold: queries whose float-path margin clears the threshold cannot have
their argmax flipped by table or embedding quantization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedstore import EmbeddingTable
from .encoder import LayerGraph, forward_f32, forward_i8, preprocess
from .errors import DimensionTooLarge, ZeroNorm
from .tensor import NORM_EPS

__all__ = [
    "Prediction",
    "classify",
    "classify_batch",
    "run_pipeline",
    "cosine_noise_bound",
    "decision_margin_threshold",
    "agreement_rate",
]


@dataclass(frozen=True)
class Prediction:
    """Argmax decision plus the full score vector for downstream inspection."""

    class_name: str
    class_index: int
    score: float
    margin: float
    scores: np.ndarray

    def rank(self) -> list[tuple[str, float]]:
        order = np.argsort(-self.scores, kind="stable")
        return [(self._names[i], float(self.scores[i])) for i in order]

    # populated by classify; excluded from repr/equality so predictions
    # compare score-centric
    _names: tuple[str, ...] = field(default=(), repr=False, compare=False)


def _normalized_rows(table: EmbeddingTable, d: int) -> np.ndarray:
    rows = table.rows(d)
    norms = np.linalg.norm(rows, axis=1)
    safe = np.where(norms > NORM_EPS, norms, 1.0)
    out = rows / safe[:, None]
    out[norms <= NORM_EPS] = 0.0  # zero prototypes score 0 against everything
    return out


def classify(embedding: np.ndarray, table: EmbeddingTable, d: int | None = None) -> Prediction:
    """Cosine argmax over the table at prefix ``d`` (default: full width).

    Ties break toward the lowest class index. A zero query embedding is a
    degenerate input and raises ZeroNorm.
    """
    d = table.d_max if d is None else int(d)
    if d > table.d_max:
        raise DimensionTooLarge(f"prefix {d} exceeds stored dimension {table.d_max}")
    if d < 1:
        raise ValueError("prefix dimension must be >= 1")
    z = np.asarray(embedding, dtype=np.float64).ravel()
    if z.size < d:
        raise DimensionTooLarge(f"embedding has {z.size} dims, need at least {d}")
    z = z[:d]
    norm = np.linalg.norm(z)
    if norm <= NORM_EPS:
        raise ZeroNorm("query embedding has (near) zero norm over the prefix")
    z = z / norm
    scores = _normalized_rows(table, d) @ z
    winner = int(np.argmax(scores))
    if scores.size > 1:
        rest = np.delete(scores, winner)
        margin = float(scores[winner] - np.max(rest))
    else:
        margin = float("inf")
    pred = Prediction(
        class_name=table.class_names[winner],
        class_index=winner,
        score=float(scores[winner]),
        margin=margin,
        scores=scores,
    )
    object.__setattr__(pred, "_names", table.class_names)
    return pred


def classify_batch(embeddings: np.ndarray, table: EmbeddingTable,
                   d: int | None = None) -> list[Prediction]:
    return [classify(e, table, d) for e in np.asarray(embeddings, dtype=np.float64)]


def run_pipeline(g: LayerGraph, image: np.ndarray, table: EmbeddingTable,
                 d: int | None = None, int8: bool = True, qmax: int = 127) -> Prediction:
    """Preprocess, encode (integer path by default), and classify one image."""
    x = preprocess(image, g.input_shape)
    z = forward_i8(g, x, qmax=qmax) if int8 else forward_f32(g, x)
    return classify(z, table, d)


# -- noise-aware margins -----------------------------------------------------

def cosine_noise_bound(table: EmbeddingTable, d: int | None = None,
                       embedding_noise: float = 0.0,
                       embedding_norm: float = 1.0) -> float:
    """Worst-case shift of any single cosine score due to quantization.

    Prototype rows are unit norm before encoding, so an L2 code error of r
    moves the normalized row by at most 2r and the cosine by the same. A
    per-element embedding error bound e (from the integer encoder path)
    contributes through the normalized query: at most 2 * sqrt(d) * e / |z|.
    """
    d = table.d_max if d is None else int(d)
    shift = 2.0 * float(np.max(table.row_noise_bound(d)))
    if embedding_noise > 0.0:
        shift += 2.0 * np.sqrt(d) * embedding_noise / max(embedding_norm, NORM_EPS)
    return shift


def decision_margin_threshold(table: EmbeddingTable, d: int | None = None,
                              embedding_noise: float = 0.0,
                              embedding_norm: float = 1.0) -> float:
    """Margin above which the float-path argmax is provably quantization-proof.

    The winning score can drop by one score shift and the runner-up can rise
    by one, so the safe threshold is twice the single-score bound.
    """
    return 2.0 * cosine_noise_bound(table, d, embedding_noise, embedding_norm)


def agreement_rate(reference: list[Prediction], candidate: list[Prediction],
                   min_margin: float = 0.0) -> tuple[float, int]:
    """Fraction of margin-filtered reference queries whose argmax matches.

    Returns (agreement over kept queries, number kept). With no query kept
    the agreement is reported as 1.0 (vacuous).
    """
    if len(reference) != len(candidate):
        raise ValueError("prediction lists differ in length")
    kept = agree = 0
    for ref, cand in zip(reference, candidate):
        if ref.margin <= min_margin:
            continue
        kept += 1
        agree += int(ref.class_index == cand.class_index)
    return (agree / kept if kept else 1.0), kept
