"""Inference: score ensembling, proposal ranking, and grounding metrics."""

import json
import math
from dataclasses import dataclass

import numpy as np

from marn import autodiff as ad
from marn.data import (
    DatasetManifest,
    QueryTokens,
    Vocabulary,
    encode_query,
    load_feature_file,
    resample_features,
    resolve_feature_path,
)
from marn.errors import DataError
from marn.model import AttentionMap, ModelConfig, ModelParams, forward, proposal_grid
from marn.sampling import ProposalGrid, proposal_interval


@dataclass
class GroundingResult:
    query_id: str
    ranked: list  # [(t_s, t_e, score), ...] descending by score


@dataclass
class MetricReport:
    recalls: dict  # (n, theta) -> fraction
    miou: float
    n_queries: int

    def key_for(self, n: int, theta: float) -> str:
        return f"R@{n}_IoU={theta:g}"

    def to_json_dict(self) -> dict:
        out = {}
        for (n, theta), value in self.recalls.items():
            out[self.key_for(n, theta)] = round(value, 4)
        out["mIoU"] = round(self.miou, 4)
        out["n_queries"] = self.n_queries
        return out


def temporal_iou(a, b) -> float:
    """Intersection over union of two (t_s, t_e) intervals."""
    for iv in (a, b):
        if not iv[0] < iv[1]:
            raise ValueError(f"interval {iv} has no positive length")
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return float(inter / union)


def ensemble_scores(attn_p, attn_c, epsilon: float, grid: ProposalGrid) -> np.ndarray:
    """Per-cell ranking scores; invalid cells get -inf.

    Valid cell (i, scale s) scores attn_p[i, j] plus epsilon times the clip
    attention at the proposal's center clip floor(i + s/2), clamped into
    range.  attn_c may be None, which (like epsilon = 0) reduces to the
    proposal attention alone.
    """
    p = attn_p.scores if isinstance(attn_p, AttentionMap) else np.asarray(attn_p)
    if p.shape != (grid.T, grid.S):
        raise ValueError(f"attention shape {p.shape} != grid {(grid.T, grid.S)}")
    valid = grid.valid_mask()
    scores = np.full((grid.T, grid.S), -np.inf)
    if attn_c is None or epsilon == 0.0:
        scores[valid] = p[valid]
        return scores
    c = attn_c.scores if isinstance(attn_c, AttentionMap) else np.asarray(attn_c)
    clip_vec = c.reshape(-1)
    if clip_vec.size != grid.T:
        raise ValueError(f"clip attention has {clip_vec.size} entries, expected {grid.T}")
    starts = np.arange(grid.T)
    for j, s in enumerate(grid.scales):
        centers = np.minimum(starts + s // 2, grid.T - 1)
        col = p[:, j] + epsilon * clip_vec[centers]
        scores[valid[:, j], j] = col[valid[:, j]]
    return scores


def rank_proposals(scores: np.ndarray, grid: ProposalGrid, unit_seconds: float,
                   top_n: int, query_id: str = "") -> GroundingResult:
    """Sort valid cells by score; ties go to the earlier start, then the
    smaller scale."""
    valid = grid.valid_mask()
    cells = [
        (-scores[i, j], i, grid.scales[j], j)
        for i in range(grid.T)
        for j in range(grid.S)
        if valid[i, j] and math.isfinite(scores[i, j])
    ]
    if not cells:
        raise ValueError("no valid proposal to rank")
    cells.sort()
    ranked = []
    for neg_score, i, _, j in cells[:top_n]:
        t_lo, t_hi = proposal_interval(grid, i, j)
        ranked.append((t_lo * unit_seconds, t_hi * unit_seconds, -neg_score))
    return GroundingResult(query_id=query_id, ranked=ranked)


def nms_filter(ranked: list, iou_threshold: float = 0.5) -> list:
    """Greedy suppression of intervals overlapping a kept one above the
    threshold.  Off by default everywhere; never used in acceptance runs."""
    kept = []
    for t_s, t_e, score in ranked:
        if all(temporal_iou((t_s, t_e), (k[0], k[1])) < iou_threshold for k in kept):
            kept.append((t_s, t_e, score))
    return kept


def _gt_for(result: GroundingResult, gt: dict):
    if result.query_id not in gt or gt[result.query_id] is None:
        raise DataError(f"query {result.query_id!r} has no ground-truth interval")
    return gt[result.query_id]


def recall_at_n(results: list, gt: dict, n: int, theta: float) -> float:
    """Fraction of queries whose top-n list holds an interval with
    IoU >= theta against ground truth."""
    if not results:
        raise ValueError("no results to score")
    hits = 0
    for result in results:
        interval = _gt_for(result, gt)
        if any(temporal_iou((t_s, t_e), interval) >= theta for t_s, t_e, _ in result.ranked[:n]):
            hits += 1
    return hits / len(results)


def mean_iou(results: list, gt: dict) -> float:
    """Mean IoU of each query's top-1 interval against ground truth."""
    if not results:
        raise ValueError("no results to score")
    total = 0.0
    for result in results:
        interval = _gt_for(result, gt)
        t_s, t_e, _ = result.ranked[0]
        total += temporal_iou((t_s, t_e), interval)
    return total / len(results)


def build_metric_report(results: list, gt: dict, n_list, theta_list) -> MetricReport:
    recalls = {}
    for n in n_list:
        for theta in theta_list:
            recalls[(n, theta)] = recall_at_n(results, gt, n, theta)
    report = MetricReport(recalls=recalls, miou=mean_iou(results, gt), n_queries=len(results))
    # monotonicity is guaranteed by construction; a violation means a bug
    for theta in theta_list:
        by_n = [recalls[(n, theta)] for n in sorted(n_list)]
        assert all(a <= b + 1e-12 for a, b in zip(by_n, by_n[1:])), "recall must grow with n"
    for n in n_list:
        by_theta = [recalls[(n, theta)] for theta in sorted(theta_list)]
        assert all(a >= b - 1e-12 for a, b in zip(by_theta, by_theta[1:])), (
            "recall must shrink as the threshold rises"
        )
    return report


def score_forward_outputs(outputs, config: ModelConfig) -> np.ndarray:
    """Ensemble scores from one forward pass, honoring multilevel_infer."""
    grid = proposal_grid(config)
    att_p = outputs.att_p.data
    if config.multilevel_infer and outputs.att_c is not None:
        return ensemble_scores(att_p, outputs.att_c.data, config.ensemble_weight, grid)
    return ensemble_scores(att_p, None, 0.0, grid)


def ground_single(params: ModelParams, config: ModelConfig, raw, query: QueryTokens,
                  top_n: int, query_id: str = "") -> GroundingResult:
    """Full single-query inference: resample, forward, ensemble, rank."""
    video = resample_features(raw, config.T)
    with ad.no_grad():
        outputs = forward(video, query, params, config)
        scores = score_forward_outputs(outputs, config)
    return rank_proposals(scores, proposal_grid(config), video.unit_seconds, top_n, query_id)


def run_evaluation(params: ModelParams, config: ModelConfig, vocab: Vocabulary,
                   manifest: DatasetManifest, manifest_path, n_list=(1, 5),
                   theta_list=(0.3, 0.5, 0.7), use_nms: bool = False):
    """Ground every manifest query and score against its gt interval.

    Returns (results, report).  Entries must carry gt intervals.
    """
    if not manifest.entries:
        raise DataError("manifest holds no queries")
    n_list = sorted(set(int(n) for n in n_list))
    theta_list = sorted(set(float(t) for t in theta_list))
    top_n = max(n_list)
    results = []
    gt = {}
    for idx, entry in enumerate(manifest.entries):
        raw = load_feature_file(resolve_feature_path(manifest_path, entry.feature_path))
        if raw.dim != config.d_v:
            raise DataError(
                f"{entry.video_id}: feature dim {raw.dim} != config d_v {config.d_v}"
            )
        query = encode_query(entry.sentence, vocab, config.max_query_len)
        query_id = f"{entry.video_id}#{idx}"
        result = ground_single(params, config, raw, query, top_n, query_id)
        if use_nms:
            result.ranked = nms_filter(result.ranked)
        results.append(result)
        gt[query_id] = entry.gt_interval
    report = build_metric_report(results, gt, n_list, theta_list)
    return results, report


def write_predictions(path, results: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for result in results:
            obj = {
                "query_id": result.query_id,
                "ranked": [[t_s, t_e, score] for t_s, t_e, score in result.ranked],
            }
            fh.write(json.dumps(obj) + "\n")


def write_report(path, report: MetricReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
