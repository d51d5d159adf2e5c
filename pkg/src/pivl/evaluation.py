"""Retrieval evaluation (single-query CMC / mAP) and the within-part
consistency probe, plus the ablation comparison harness."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import Config
from .pipeline import ReIDSystem, run_stage1, run_stage2, train_student
from .synthgen import DatasetSplit, downsample_parsing, generate_dataset


class ProtocolError(ValueError):
    """The query/gallery pair violates the single-query protocol."""


@dataclass
class EmbeddingGallery:
    rows: np.ndarray        # (n, d), L2-normalized
    identities: np.ndarray  # (n,)
    cameras: np.ndarray     # (n,)

    def __post_init__(self):
        if not (len(self.rows) == len(self.identities) == len(self.cameras)):
            raise ValueError("rows/identities/cameras must have equal length")
        norms = np.linalg.norm(self.rows, axis=1, keepdims=True)
        self.rows = self.rows / np.maximum(norms, 1e-12)


@dataclass
class RetrievalReport:
    cmc: np.ndarray                  # ranks 1..R
    map: float
    per_query_ap: np.ndarray
    consistency: dict = field(default_factory=dict)

    def to_dict(self, config_digest: str | None = None) -> dict:
        doc = {
            "map": float(self.map),
            "cmc": {str(r): float(self.cmc[r - 1]) for r in (1, 5, 10)
                    if r <= len(self.cmc)},
        }
        if self.consistency:
            doc["consistency"] = {k: float(v) for k, v in sorted(self.consistency.items())}
        if config_digest is not None:
            doc["config_digest"] = config_digest
        return doc


def extract_embeddings(system_or_encoder, samples, batch_size: int = 64) -> EmbeddingGallery:
    encoder = getattr(system_or_encoder, "encoder", system_or_encoder)
    encoder.eval()
    images = torch.from_numpy(
        np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(encoder(images[i:i + batch_size]).global_embed)
    rows = torch.cat(outs).numpy().astype(np.float64)
    return EmbeddingGallery(rows,
                            np.array([s.identity for s in samples]),
                            np.array([s.camera for s in samples]))


def compute_cmc_map(query: EmbeddingGallery, gallery: EmbeddingGallery,
                    max_rank: int = 10) -> RetrievalReport:
    """Single-query protocol: rank by cosine distance, drop gallery entries
    sharing both identity and camera with the query, ties broken by stable
    gallery index."""
    dist = 1.0 - query.rows @ gallery.rows.T
    n_query = len(query.rows)
    cmc_hits = np.zeros(max_rank)
    aps = np.zeros(n_query)
    offenders = []
    for qi in range(n_query):
        order = np.argsort(dist[qi], kind="stable")
        keep = ~((gallery.identities[order] == query.identities[qi])
                 & (gallery.cameras[order] == query.cameras[qi]))
        order = order[keep]
        matches = gallery.identities[order] == query.identities[qi]
        n_rel = int(matches.sum())
        if n_rel == 0:
            offenders.append((qi, int(query.identities[qi]), int(query.cameras[qi])))
            continue
        first = int(np.flatnonzero(matches)[0])
        if first < max_rank:
            cmc_hits[first:] += 1
        precision_at = np.cumsum(matches) / (np.arange(len(matches)) + 1.0)
        aps[qi] = float((precision_at * matches).sum() / n_rel)
    if offenders:
        detail = ", ".join(f"query#{q} (identity {y}, camera {c})" for q, y, c in offenders)
        raise ProtocolError(f"unevaluable queries with no valid positive: {detail}")
    return RetrievalReport(cmc_hits / n_query, float(aps.mean()), aps)


# ---------------------------------------------------------------------------
# within-part consistency probe
# ---------------------------------------------------------------------------

def part_consistency_probe(system: ReIDSystem, samples, seed: int = 0,
                           pair_cap: int = 100_000, cell_cap: int = 20_000) -> dict:
    """Scores the part coherence of stride-8 cell features.

    intra_part_sim / inter_part_sim are mean cosine similarities over cell
    pairs sharing identity and (same / different) part; part_probe_acc is the
    5-fold accuracy of a ridge-regularized linear classifier predicting the
    part id of a cell.
    """
    from sklearn.linear_model import RidgeClassifier
    from sklearn.model_selection import KFold

    for s in samples:
        if s.parsing is None:
            raise ValueError("probe samples must carry ground-truth parsing")
    images = torch.from_numpy(
        np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
    feats = []
    with torch.no_grad():
        for i in range(0, len(images), 64):
            feats.append(system.probe_map(images[i:i + 64]))
    feats = torch.cat(feats).permute(0, 2, 3, 1).numpy().astype(np.float64)

    n, hg, wg, d = feats.shape
    cells = feats.reshape(n, hg * wg, d)
    parts = np.stack([downsample_parsing(s.parsing, 8) for s in samples]).reshape(n, hg * wg)
    idents = np.array([s.identity for s in samples])

    normed = cells / np.maximum(np.linalg.norm(cells, axis=-1, keepdims=True), 1e-12)
    rng = np.random.default_rng(seed)

    intra, inter = [], []
    per_identity = {}
    for i, y in enumerate(idents):
        per_identity.setdefault(int(y), []).append(i)
    budget = pair_cap // max(1, len(per_identity)) // 2
    for y, members in sorted(per_identity.items()):
        flat_feats = normed[members].reshape(-1, d)
        flat_parts = parts[members].reshape(-1)
        m = len(flat_parts)
        k = min(budget, 4 * m)
        a = rng.integers(0, m, size=k)
        b = rng.integers(0, m, size=k)
        keep = a != b
        a, b = a[keep], b[keep]
        sims = (flat_feats[a] * flat_feats[b]).sum(axis=1)
        same_part = flat_parts[a] == flat_parts[b]
        intra.extend(sims[same_part])
        inter.extend(sims[~same_part])

    all_cells = normed.reshape(-1, d)
    all_parts = parts.reshape(-1)
    if len(all_cells) > cell_cap:
        sel = rng.choice(len(all_cells), size=cell_cap, replace=False)
        all_cells, all_parts = all_cells[sel], all_parts[sel]
    accs = []
    for tr, te in KFold(n_splits=5, shuffle=True, random_state=seed).split(all_cells):
        clf = RidgeClassifier(alpha=1.0)
        clf.fit(all_cells[tr], all_parts[tr])
        accs.append(float(clf.score(all_cells[te], all_parts[te])))

    return {
        "intra_part_sim": float(np.mean(intra)) if intra else 1.0,
        "inter_part_sim": float(np.mean(inter)) if inter else 1.0,
        "part_probe_acc": float(np.mean(accs)),
    }


def evaluate_system(system: ReIDSystem, split: DatasetSplit, *, probe: bool = False,
                    seed: int = 0, config_digest: str | None = None) -> dict:
    report = compute_cmc_map(extract_embeddings(system, split.query),
                             extract_embeddings(system, split.gallery))
    if probe:
        report.consistency = part_consistency_probe(system, split.query + split.gallery,
                                                    seed=seed)
    return report.to_dict(config_digest)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("B", "B+H", "B+P", "B+P+F")
_VARIANT_FLAGS = {"B": frozenset(), "B+H": frozenset("H"),
                  "B+P": frozenset("P"), "B+P+F": frozenset({"P", "F"})}


def run_variant(split: DatasetSplit, config: Config, variant: str,
                out_dir: str | None = None, probe: bool = True,
                stage1_cache: dict | None = None) -> dict:
    """Full stage1 + stage2 + evaluation for one ablation variant."""
    flags = _VARIANT_FLAGS[variant]
    part_phase = "P" in flags
    cache_key = part_phase
    if stage1_cache is not None and cache_key in stage1_cache:
        prompts = stage1_cache[cache_key]
    else:
        prompts = run_stage1(split, config, part_phase=part_phase)
        if stage1_cache is not None:
            stage1_cache[cache_key] = prompts
    paths = {}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        paths = {"out_path": os.path.join(out_dir, f"{variant.replace('+', '_')}.pt"),
                 "log_path": os.path.join(out_dir, f"{variant.replace('+', '_')}_log.jsonl")}
    system = run_stage2(split, prompts, config, flags, **paths)
    doc = evaluate_system(system, split, probe=probe, seed=config.train.seed,
                          config_digest=config.digest())
    doc["variant"] = variant
    return doc


def ablation_harness(config: Config, seeds=(0, 1, 2), out_dir: str | None = None,
                     variants=ABLATION_VARIANTS, probe: bool = True) -> dict:
    """Per-variant medians of Rank-1 / mAP / probe accuracy plus deltas vs B."""
    per_variant = {v: [] for v in variants}
    for seed in seeds:
        cfg = Config.from_dict(config.to_dict()).validate()
        cfg.train.seed = int(seed)
        split = generate_dataset(cfg.data, seed=int(seed))
        stage1_cache: dict = {}
        for variant in variants:
            run_dir = os.path.join(out_dir, f"seed{seed}") if out_dir else None
            doc = run_variant(split, cfg, variant, out_dir=run_dir, probe=probe,
                              stage1_cache=stage1_cache)
            doc["seed"] = int(seed)
            per_variant[variant].append(doc)

    def med(values):
        return float(np.median(values))

    rows = []
    for variant in variants:
        runs = per_variant[variant]
        row = {
            "variant": variant,
            "rank1": med([r["cmc"]["1"] for r in runs]),
            "map": med([r["map"] for r in runs]),
        }
        if probe:
            row["part_probe_acc"] = med([r["consistency"]["part_probe_acc"] for r in runs])
            row["intra_part_sim"] = med([r["consistency"]["intra_part_sim"] for r in runs])
        rows.append(row)
    base = rows[0]
    for row in rows:
        row["delta_rank1"] = row["rank1"] - base["rank1"]
        row["delta_map"] = row["map"] - base["map"]
    table = {"seeds": [int(s) for s in seeds], "rows": rows, "runs": per_variant}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)
    return table


def transfer_experiment(config: Config, seeds=(0, 1, 2), out_dir: str | None = None) -> dict:
    """Student-transfer comparison: teacher prompts vs no-text baseline."""
    results = {"with_prompts": [], "baseline": []}
    for seed in seeds:
        cfg = Config.from_dict(config.to_dict()).validate()
        cfg.train.seed = int(seed)
        split = generate_dataset(cfg.data, seed=int(seed))
        prompts = run_stage1(split, cfg, part_phase=True)
        run_dir = os.path.join(out_dir, f"seed{seed}") if out_dir else None
        systems = train_student(split, prompts, cfg, out_dir=run_dir)
        for arm in ("with_prompts", "baseline"):
            doc = evaluate_system(systems[arm], split, probe=False)
            doc["seed"] = int(seed)
            results[arm].append(doc)
    summary = {
        arm: {
            "map_median": float(np.median([r["map"] for r in results[arm]])),
            "rank1_median": float(np.median([r["cmc"]["1"] for r in results[arm]])),
        }
        for arm in results
    }
    table = {"seeds": [int(s) for s in seeds], "summary": summary, "runs": results}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "transfer.json"), "w") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)
    return table


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def export_embeddings_csv(gallery: EmbeddingGallery, path: str):
    """CSV with header identity,camera,e0..e{d-1}; 9 significant digits."""
    d = gallery.rows.shape[1]
    header = "identity,camera," + ",".join(f"e{i}" for i in range(d))
    lines = [header]
    for row, ident, cam in zip(gallery.rows, gallery.identities, gallery.cameras):
        values = ",".join(f"{v:.9g}" for v in row)
        lines.append(f"{int(ident)},{int(cam)},{values}")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_report(doc: dict, path: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
