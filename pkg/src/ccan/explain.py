"""Attention rollout from recorded matrices, plus export helpers.

Per stage, only the final cross-attention over the input tokens and the
self-attention layer(s) after it are rolled out: each self matrix A is
mixed with the identity (0.5*A + 0.5*I, rows renormalized) to account
for the residual path, the mixed matrices are chained in execution
order, and the class-token row of the chain is pushed through the cross
matrix. The per-stage score vectors are averaged over stages and
min-max normalized into a per-patch attention map.

Explanations are defined for eval-mode forwards; tokens dropped during
training never appear here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import DataError, UsageError
from .netpbm import write_pgm


@dataclass
class AttentionMap:
    """Per-token relevance scores aligned to the bag's coordinate grid."""

    scores: np.ndarray  # one score per original input token
    rows: np.ndarray
    cols: np.ndarray
    rows_total: int
    cols_total: int
    normalization: str  # "raw" | "minmax"
    kept_mask: np.ndarray  # False where the token was dropped pre-forward

    def token_grid(self):
        """rows_total x cols_total array of token indices, -1 where empty."""
        grid = np.full((self.rows_total, self.cols_total), -1, dtype=np.int64)
        grid[self.rows, self.cols] = np.arange(len(self.scores))
        return grid


def _residual_mix(matrix):
    mixed = 0.5 * matrix + 0.5 * np.eye(matrix.shape[0])
    return mixed / mixed.sum(axis=1, keepdims=True)


def rollout_stage(stage):
    """Class-token relevance over the stage's context tokens (length N_kept)."""
    if not stage.records:
        raise UsageError("stage has no recorded attention")
    last_cross = None
    for i, rec in enumerate(stage.records):
        if rec.kind == "cross":
            last_cross = i
    if last_cross is None:
        raise UsageError("stage records contain no cross-attention")
    cross = stage.records[last_cross].matrix
    chain = np.eye(cross.shape[0])
    for rec in stage.records[last_cross + 1 :]:
        if rec.kind == "self":
            chain = _residual_mix(rec.matrix) @ chain
    class_row = chain[-1]
    return class_row @ cross


def aggregate_rollout(model_output, bag):
    """Mean stage rollout, min-max normalized, placed on the bag's grid."""
    n = bag.n_tokens
    kept = model_output.kept_indices
    stage_scores = np.stack([rollout_stage(so) for so in model_output.stages])
    mean_scores = stage_scores.mean(axis=0)
    scores = np.zeros(n, dtype=np.float64)
    scores[kept] = mean_scores
    kept_mask = np.zeros(n, dtype=bool)
    kept_mask[kept] = True
    span = scores.max() - scores.min()
    if n >= 2 and span > 0:
        scores = (scores - scores.min()) / span
        normalization = "minmax"
    else:
        normalization = "raw"
    return AttentionMap(
        scores=scores,
        rows=bag.rows.copy(),
        cols=bag.cols.copy(),
        rows_total=bag.rows_total,
        cols_total=bag.cols_total,
        normalization=normalization,
        kept_mask=kept_mask,
    )


def explain_bag(model, bag):
    """Eval-mode forward plus rollout aggregation in one call."""
    with ag.no_grad():
        out = model.forward(bag, train_mode=False)
    return aggregate_rollout(out, bag)


def top_k_patches(attention_map, k):
    """(lowest-k, highest-k) token indices; ties break toward lower index."""
    n = len(attention_map.scores)
    if k > n:
        raise UsageError(f"k={k} exceeds token count {n}")
    idx = np.arange(n)
    lowest = idx[np.lexsort((idx, attention_map.scores))][:k]
    highest = idx[np.lexsort((idx, -attention_map.scores))][:k]
    return lowest.tolist(), highest.tolist()


def export_heatmap(attention_map, path_base):
    """Write <base>.csv ((row, col, score) per token) and <base>.pgm.

    The raster covers the full grid at one pixel per cell; cells without
    a token render as 0, scores map to round(score * 255).
    """
    csv_path = f"{path_base}.csv"
    pgm_path = f"{path_base}.pgm"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for r, c, s in zip(attention_map.rows, attention_map.cols, attention_map.scores):
            writer.writerow([int(r), int(c), repr(float(s))])
    raster = np.zeros((attention_map.rows_total, attention_map.cols_total), dtype=np.float64)
    raster[attention_map.rows, attention_map.cols] = np.clip(attention_map.scores, 0.0, 1.0)
    write_pgm(np.rint(raster * 255.0).astype(np.uint8), pgm_path)
    return csv_path, pgm_path


def export_class_embeddings(model, bags, path):
    """CSV of per-stage class-token embeddings: (bag_id, stage, e0..e{D-1})."""
    d = model.config.d_latent
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "stage"] + [f"e{i}" for i in range(d)])
        for bag in bags:
            with ag.no_grad():
                out = model.forward(bag, train_mode=False)
            for j, so in enumerate(out.stages, start=1):
                emb = so.class_embedding.data.reshape(-1)
                writer.writerow([bag.bag_id, j] + [repr(float(v)) for v in emb])
    return path
