"""Two-stage training orchestration.

Stage 1 tunes per-identity prompt context against a frozen encoder (identity
warm-up, then part-informed dense contrast). Stage 2 trains the image encoder
with the ReID losses plus the optional dense alignment MSE. Every run is
deterministic at a fixed seed: model inits draw from purpose-derived torch
seeds, all sampling comes from explicit numpy generators.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn

from . import losses
from .config import Config, EncoderConfig
from .encoders import (TextEncoder, build_image_encoder, parameter_digest)
from .fusion import FusionHead, SingleStageAlignHead, TokenPyramid
from .prompts import PromptContextStore, save_prompts
from .synthgen import IGNORE_ID, DatasetSplit, downsample_parsing

VALID_FLAGS = frozenset({"H", "P", "F"})


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a mixed tuple of ints and strings."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.extend(p.encode())
        else:
            ints.append(int(p) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(ints).generate_state(1, np.uint64)[0])


def _torch_seed(*parts):
    torch.manual_seed(derive_seed(*parts) & 0x7FFFFFFFFFFFFFFF)


# ---------------------------------------------------------------------------
# batches and augmentation
# ---------------------------------------------------------------------------

@dataclass
class BatchBundle:
    images: torch.Tensor      # (B, 3, H, W)
    identities: torch.Tensor  # (B,) global identity labels
    cameras: torch.Tensor     # (B,)
    rows: torch.Tensor        # (B,) classifier target = index into train identity list
    parsing: np.ndarray       # (B, H, W) uint8 with IGNORE in erased regions


class PKSampler:
    """P distinct identities x K instances, with replacement only when short."""

    def __init__(self, identities: list[int], batch_identities: int, batch_instances: int):
        self.groups: dict[int, np.ndarray] = {}
        for i, ident in enumerate(identities):
            self.groups.setdefault(ident, []).append(i)
        self.groups = {k: np.asarray(v) for k, v in self.groups.items()}
        self.ids = np.asarray(sorted(self.groups))
        self.p = batch_identities
        self.k = batch_instances
        if len(self.ids) < self.p:
            raise losses.BatchError(
                f"need >= {self.p} identities for PK sampling, have {len(self.ids)}")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        chosen = rng.choice(self.ids, size=self.p, replace=False)
        out = []
        for ident in chosen:
            group = self.groups[ident]
            replacement = len(group) < self.k
            out.append(rng.choice(group, size=self.k, replace=replacement))
        return np.concatenate(out)


def augment_sample(image: np.ndarray, parsing: np.ndarray, rng: np.random.Generator,
                   flip_prob=0.5, crop_pad=2, erase_prob=0.5):
    """Flip / pad-crop / erase; geometry applies jointly, erasure marks IGNORE."""
    img = image.copy()
    par = parsing.copy()
    h, w = par.shape
    if rng.random() < flip_prob:
        img = img[:, ::-1].copy()
        par = par[:, ::-1].copy()
    if crop_pad > 0:
        p = crop_pad
        img = np.pad(img, ((p, p), (p, p), (0, 0)), mode="edge")
        par = np.pad(par, ((p, p), (p, p)), mode="edge")
        dy = int(rng.integers(0, 2 * p + 1))
        dx = int(rng.integers(0, 2 * p + 1))
        img = img[dy:dy + h, dx:dx + w]
        par = par[dy:dy + h, dx:dx + w]
    if rng.random() < erase_prob:
        area = rng.uniform(0.05, 0.2) * h * w
        aspect = rng.uniform(0.4, 2.5)
        eh = min(h, max(1, int(round(math.sqrt(area * aspect)))))
        ew = min(w, max(1, int(round(math.sqrt(area / aspect)))))
        y0 = int(rng.integers(0, h - eh + 1))
        x0 = int(rng.integers(0, w - ew + 1))
        img[y0:y0 + eh, x0:x0 + ew] = rng.uniform(0.0, 1.0, size=(eh, ew, 3)).astype(img.dtype)
        par[y0:y0 + eh, x0:x0 + ew] = IGNORE_ID
    return img, par


def pk_sample(split: DatasetSplit, batch_identities: int, batch_instances: int,
              rng: np.random.Generator) -> np.ndarray:
    """One-shot PK draw over a split's train samples (indices into split.train)."""
    sampler = PKSampler([s.identity for s in split.train], batch_identities, batch_instances)
    return sampler.sample(rng)


def _make_batch(split, indices, row_of, rng=None, augment=False, tcfg=None) -> BatchBundle:
    images, parsings = [], []
    for i in indices:
        s = split.train[i]
        if augment:
            img, par = augment_sample(s.image, s.parsing, rng, tcfg.flip_prob,
                                      tcfg.crop_pad, tcfg.erase_prob)
        else:
            img, par = s.image, s.parsing
        images.append(img)
        parsings.append(par)
    idents = [split.train[i].identity for i in indices]
    return BatchBundle(
        images=torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous(),
        identities=torch.tensor(idents, dtype=torch.long),
        cameras=torch.tensor([split.train[i].camera for i in indices], dtype=torch.long),
        rows=torch.tensor([row_of[y] for y in idents], dtype=torch.long),
        parsing=np.stack(parsings),
    )


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def cosine_lr(base: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def stage2_lr(base: float, epoch: int, total_epochs: int,
              milestone_fractions=(1 / 3, 7 / 12), warmup_fraction=0.1) -> float:
    """Linear warmup, then exact base*{1, 0.1, 0.01} steps at the milestones."""
    warm = max(1, int(round(warmup_fraction * total_epochs)))
    m1 = int(round(milestone_fractions[0] * total_epochs))
    m2 = int(round(milestone_fractions[1] * total_epochs))
    if epoch < warm and epoch < m1:
        return base * (epoch + 1) / warm
    factor = 1.0
    if epoch >= m1:
        factor = 0.1
    if epoch >= m2:
        factor = 0.01
    return base * factor


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


# ---------------------------------------------------------------------------
# run log (JSON lines)
# ---------------------------------------------------------------------------

class RunLog:
    def __init__(self, path: str | None):
        self.path = path
        self.entries: list[dict] = []
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            # truncate any previous log
            open(path, "w").close()

    def log(self, **fields):
        self.entries.append(fields)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(fields, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

class IdentityClassifier(nn.Module):
    """Batchnorm neck + bias-free linear head for the identity CE term.

    Training-only: retrieval always uses the raw encoder embedding.
    """

    def __init__(self, embed_dim: int, num_identities: int):
        super().__init__()
        self.neck = nn.BatchNorm1d(embed_dim)
        self.fc = nn.Linear(embed_dim, num_identities, bias=False)

    @property
    def num_identities(self) -> int:
        return self.fc.out_features

    def forward(self, embeds):
        return self.fc(self.neck(embeds))


class ReIDSystem(nn.Module):
    """Encoder plus training-only attachments (alignment head, id classifier)."""

    def __init__(self, encoder, text_encoder=None, classifier=None,
                 align_head=None, token_pyramid=None, variant="conv", flags=frozenset()):
        super().__init__()
        self.encoder = encoder
        self.text_encoder = text_encoder
        self.classifier = classifier
        self.align_head = align_head
        self.token_pyramid = token_pyramid
        self.variant = variant
        self.flags = frozenset(flags)

    def deployed(self) -> nn.Module:
        return self.encoder

    def align_features(self, pyramid) -> torch.Tensor:
        """Stride-8 alignment map per the active fusion mode."""
        if self.align_head is None:
            raise RuntimeError("no alignment head attached")
        if self.variant == "vit":
            if isinstance(self.align_head, FusionHead):
                pyramid = self.token_pyramid.expand(pyramid)
            else:
                pyramid = replace_pyramid_stride16(pyramid)
        return self.align_head(pyramid)

    def probe_map(self, images) -> torch.Tensor:
        """Stride-8 cell features for the consistency probe."""
        if self.align_head is not None:
            return self.align_features(self.encoder(images))
        return self.encoder.cell_embedding_map(images)


def replace_pyramid_stride16(pyramid):
    from .encoders import FeaturePyramid
    import torch.nn.functional as F

    return FeaturePyramid(pyramid.stride4, pyramid.stride8,
                          F.avg_pool2d(pyramid.stride8, 2), pyramid.global_embed)


def build_frozen_text_encoder(config: Config) -> TextEncoder:
    _torch_seed(config.train.seed, "text-encoder")
    return TextEncoder(config.encoder)


def build_encoder(config: Config, tag: str = "encoder",
                  encoder_cfg: EncoderConfig | None = None):
    ecfg = encoder_cfg or config.encoder
    _torch_seed(config.train.seed, "image-encoder", tag, ecfg.variant)
    return build_image_encoder(ecfg, (config.data.height, config.data.width))


def build_prompt_store(config: Config, split: DatasetSplit) -> PromptContextStore:
    _torch_seed(config.train.seed, "prompts")
    train_ids = sorted({s.identity for s in split.train})
    return PromptContextStore(train_ids, split.part_names,
                              config.encoder.context_tokens, config.encoder.token_width)


# ---------------------------------------------------------------------------
# stage 1: prompt tuning against a frozen encoder
# ---------------------------------------------------------------------------

def run_stage1(split: DatasetSplit, config: Config, *, part_phase: bool = True,
               out_path: str | None = None, log_path: str | None = None) -> PromptContextStore:
    """Phase A optimizes the pair loss; phase B adds the dense part term.

    Only the prompt context matrices receive gradients; the encoders stay
    frozen and no input augmentation is applied.
    """
    config.validate()
    tcfg, lcfg = config.train, config.loss
    text_encoder = build_frozen_text_encoder(config)
    encoder = build_encoder(config)
    encoder.requires_grad_(False)
    encoder.eval()
    prompts = build_prompt_store(config, split)

    # frozen features are cacheable: no augmentation, no encoder updates
    with torch.no_grad():
        images = torch.from_numpy(
            np.stack([s.image for s in split.train])).permute(0, 3, 1, 2).contiguous()
        global_cache = torch.cat(
            [encoder(images[i:i + 64]).global_embed for i in range(0, len(images), 64)])
        cell_cache = torch.cat(
            [encoder.cell_embedding_map(images[i:i + 64]) for i in range(0, len(images), 64)])
    parsing_ds = np.stack([downsample_parsing(s.parsing, 8) for s in split.train])

    identities = [s.identity for s in split.train]
    ident_tensor = torch.tensor(identities, dtype=torch.long)
    sampler = PKSampler(identities, tcfg.batch_identities, tcfg.batch_instances)
    iters = max(1, math.ceil(len(split.train) / (tcfg.batch_identities * tcfg.batch_instances)))

    optimizer = torch.optim.Adam([prompts.context], lr=tcfg.lr_stage1)
    rng = np.random.default_rng(derive_seed(tcfg.seed, "stage1"))
    log = RunLog(log_path)
    total_epochs = tcfg.stage1_id_epochs + (tcfg.stage1_part_epochs if part_phase else 0)
    n_parts = len(split.part_names)
    step = 0

    for epoch in range(total_epochs):
        lr = cosine_lr(tcfg.lr_stage1, epoch, total_epochs)
        _set_lr(optimizer, lr)
        in_part_phase = part_phase and epoch >= tcfg.stage1_id_epochs
        for _ in range(iters):
            idx = sampler.sample(rng)
            batch_ids = ident_tensor[idx]
            seqs = torch.stack(
                [prompts.assemble_identity_prompt(int(y)) for y in batch_ids])
            pair = losses.clip_pair_loss(global_cache[idx], text_encoder(seqs),
                                         batch_ids, lcfg.temperature)
            entry = {"step": step, "stage": "stage1b" if in_part_phase else "stage1a",
                     "lr": lr, "clip_pair": float(pair.detach())}
            if in_part_phase:
                dense = _stage1_dense_term(prompts, text_encoder, cell_cache, parsing_ds,
                                           idx, identities, n_parts, lcfg, rng)
                total = losses.prompt_objective(pair, dense, lcfg)
                entry["dense_part"] = float(dense.detach())
            else:
                total = pair
            entry["total"] = float(total.detach())
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            log.log(**entry)
            step += 1

    if out_path:
        save_prompts(prompts, out_path)
    return prompts


def _stage1_dense_term(prompts, text_encoder, cell_cache, parsing_ds, idx,
                       identities, n_parts, lcfg, rng):
    cell_feats, keys = [], []
    for i in idx:
        sel = losses.stratified_cell_sample(parsing_ds[i], lcfg.cells_per_image, rng)
        flat = cell_cache[i].flatten(1)  # (d, Hg*Wg)
        cell_feats.append(flat[:, sel].T)
        part_ids = parsing_ds[i].ravel()[sel].astype(np.int64)
        keys.append(identities[i] * n_parts + part_ids)
    cell_feats = torch.cat(cell_feats)
    keys = torch.from_numpy(np.concatenate(keys))

    uniq = torch.unique(keys)
    seqs = torch.stack([
        prompts.assemble_part_prompt(int(k) // n_parts,
                                     prompts.part_names[int(k) % n_parts])
        for k in uniq])
    uniq_embeds = text_encoder(seqs)
    lookup = {int(k): row for row, k in enumerate(uniq)}
    cell_texts = uniq_embeds[[lookup[int(k)] for k in keys]]
    return losses.dense_part_contrastive(cell_feats, cell_texts, keys, lcfg.temperature)


# ---------------------------------------------------------------------------
# stage 2: encoder training under the full objective
# ---------------------------------------------------------------------------

def run_stage2(split: DatasetSplit, prompts: PromptContextStore, config: Config,
               flags=frozenset(), *, include_text_terms: bool = True,
               encoder_cfg: EncoderConfig | None = None, seed_tag: str = "stage2",
               out_path: str | None = None, log_path: str | None = None) -> ReIDSystem:
    """Train the image encoder; prompts and the text encoder stay frozen.

    flags select the ablation variant: H = parsing-label-only prompts,
    P = identity-aware part prompts, F = hierarchical fusion. With neither H
    nor P the alignment term is dropped entirely.
    """
    config.validate()
    flags = frozenset(flags)
    if not flags <= VALID_FLAGS:
        raise ValueError(f"unknown ablation flags: {sorted(flags - VALID_FLAGS)}")
    if {"H", "P"} <= flags:
        raise ValueError("flags H and P are mutually exclusive prompt modes")
    tcfg, lcfg = config.train, config.loss
    ecfg = encoder_cfg or config.encoder

    text_encoder = build_frozen_text_encoder(config)
    encoder = build_encoder(config, tag=seed_tag, encoder_cfg=ecfg)
    prompts.requires_grad_(False)

    align_on = bool(flags & {"H", "P"})
    prompt_mode = "identity" if "P" in flags else "generic"
    _torch_seed(tcfg.seed, "heads", seed_tag)
    n_train_ids = len(prompts.identities)
    classifier = IdentityClassifier(ecfg.embed_dim, n_train_ids)
    align_head = token_pyramid = None
    if align_on:
        if ecfg.variant == "vit":
            width = ecfg.stage_channels[-1]
            channels = (width, width, width)
            token_pyramid = TokenPyramid(width)
        else:
            channels = tuple(ecfg.stage_channels)
        if "F" in flags:
            align_head = FusionHead(channels, ecfg.embed_dim)
        else:
            align_head = SingleStageAlignHead(channels[-1], ecfg.embed_dim)

    with torch.no_grad():
        identity_texts = prompts.identity_text_matrix(text_encoder)
        part_table = prompts.part_text_table(text_encoder, prompt_mode) if align_on else None
    if include_text_terms and identity_texts.shape[1] != ecfg.embed_dim:
        raise ValueError(
            f"embedding dim mismatch: encoder d={ecfg.embed_dim}, "
            f"prompt texts d={identity_texts.shape[1]}")

    system = ReIDSystem(encoder, text_encoder, classifier, align_head,
                        token_pyramid, ecfg.variant, flags)
    row_of = {ident: i for i, ident in enumerate(prompts.identities)}

    params = list(encoder.parameters()) + list(classifier.parameters())
    if align_head is not None:
        params += list(align_head.parameters())
    if token_pyramid is not None and isinstance(align_head, FusionHead):
        params += list(token_pyramid.parameters())
    base_lr = tcfg.lr_stage2_vit if ecfg.variant == "vit" else tcfg.lr_stage2_conv
    optimizer = torch.optim.Adam(params, lr=base_lr)

    sampler = PKSampler([s.identity for s in split.train],
                        tcfg.batch_identities, tcfg.batch_instances)
    iters = max(1, math.ceil(len(split.train) / (tcfg.batch_identities * tcfg.batch_instances)))
    # the batch/augmentation stream depends only on (seed, tag): ablation
    # variants train on identical batch sequences, so their metric deltas
    # isolate the loss wiring rather than sampling noise
    rng = np.random.default_rng(derive_seed(tcfg.seed, "stage2", seed_tag))
    log = RunLog(log_path)
    bg_weight = lcfg.background_cell_weight
    step = 0

    for epoch in range(tcfg.stage2_epochs):
        lr = stage2_lr(base_lr, epoch, tcfg.stage2_epochs,
                       tcfg.milestone_fractions, tcfg.warmup_fraction)
        _set_lr(optimizer, lr)
        for _ in range(iters):
            batch = _make_batch(split, sampler.sample(rng), row_of,
                                rng=rng, augment=True, tcfg=tcfg)
            pyramid = encoder(batch.images)
            embed = pyramid.global_embed
            id_term = losses.identity_ce(classifier(embed), batch.rows, lcfg.label_smoothing)
            tri_term = losses.triplet_batch_hard(embed, batch.identities, lcfg.margin)
            entry = {"step": step, "stage": "stage2", "lr": lr,
                     "id_ce": float(id_term.detach()), "triplet": float(tri_term.detach())}
            i2t_term = None
            if include_text_terms:
                i2t_term = losses.image_text_ce(embed, identity_texts, batch.rows, lcfg)
                entry["i2tce"] = float(i2t_term.detach())
            align_term = None
            if align_on:
                align_term = _alignment_term(system, pyramid, batch, part_table,
                                             prompt_mode, row_of, bg_weight)
                entry["align"] = float(align_term.detach())
            total = losses.overall_objective(id_term, tri_term, i2t_term, align_term, lcfg)
            entry["total"] = float(total.detach())
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            log.log(**entry)
            step += 1

    system.eval()
    if out_path:
        save_checkpoint(out_path, system, config, flags,
                        stage="stage2", epoch=tcfg.stage2_epochs,
                        encoder_cfg=ecfg, rng=rng)
    return system


def _alignment_term(system, pyramid, batch, part_table, prompt_mode, row_of, bg_weight):
    fused = system.align_features(pyramid).permute(0, 2, 3, 1)  # (B, Hg, Wg, d)
    ds = np.stack([downsample_parsing(p, 8) for p in batch.parsing])
    ignore = torch.from_numpy(ds == IGNORE_ID)
    part_idx = torch.from_numpy(np.where(ds == IGNORE_ID, 0, ds).astype(np.int64))
    if prompt_mode == "identity":
        rows = torch.tensor([row_of[int(y)] for y in batch.identities])
        targets = part_table[rows.view(-1, 1, 1), part_idx]
    else:
        targets = part_table[0][part_idx]
    weights = None
    if bg_weight != 1.0:
        weights = torch.where(part_idx == 0,
                              torch.as_tensor(bg_weight, dtype=fused.dtype),
                              torch.ones((), dtype=fused.dtype))
    return losses.mse_align(fused, targets, ignore, weights)


# ---------------------------------------------------------------------------
# student transfer
# ---------------------------------------------------------------------------

def student_encoder_config(ecfg: EncoderConfig) -> EncoderConfig:
    halved = tuple(max(4, c // 2) for c in ecfg.stage_channels)
    return replace(ecfg, variant="conv", stage_channels=halved)


def train_student(split: DatasetSplit, prompts: PromptContextStore, config: Config,
                  out_dir: str | None = None):
    """Stage-2 twice on a fresh half-width student: with teacher prompts
    (text terms + alignment) and as a plain id+triplet baseline."""
    student_cfg = student_encoder_config(config.encoder)
    paths = {}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "with_prompts": os.path.join(out_dir, "student_with_prompts.pt"),
            "baseline": os.path.join(out_dir, "student_baseline.pt"),
        }
    with_prompts = run_stage2(
        split, prompts, config, flags={"P", "F"}, encoder_cfg=student_cfg,
        seed_tag="student", out_path=paths.get("with_prompts"),
        log_path=os.path.join(out_dir, "student_with_prompts_log.jsonl") if out_dir else None)
    baseline = run_stage2(
        split, prompts, config, flags=frozenset(), include_text_terms=False,
        encoder_cfg=student_cfg, seed_tag="student", out_path=paths.get("baseline"),
        log_path=os.path.join(out_dir, "student_baseline_log.jsonl") if out_dir else None)
    return {"with_prompts": with_prompts, "baseline": baseline}


# ---------------------------------------------------------------------------
# checkpoints: binary blob + sidecar JSON, atomic writes
# ---------------------------------------------------------------------------

def _atomic_write(path: str, writer):
    tmp = path + ".tmp"
    writer(tmp)
    os.replace(tmp, path)


def rng_digest(rng: np.random.Generator) -> str:
    import hashlib

    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha256(state.encode()).hexdigest()


def save_checkpoint(path: str, system: ReIDSystem, config: Config, flags,
                    stage: str, epoch: int, encoder_cfg: EncoderConfig, rng=None):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    blob = {
        "encoder": system.encoder.state_dict(),
        "classifier": system.classifier.state_dict() if system.classifier else None,
        "align_head": system.align_head.state_dict() if system.align_head else None,
        "token_pyramid": system.token_pyramid.state_dict() if system.token_pyramid else None,
        "align_head_kind": type(system.align_head).__name__ if system.align_head else None,
    }
    _atomic_write(path, lambda tmp: torch.save(blob, tmp))
    sidecar = {
        "config": config.to_dict(),
        "encoder_cfg": encoder_cfg.__dict__ | {"stage_channels": list(encoder_cfg.stage_channels)},
        "flags": sorted(flags),
        "stage": stage,
        "epoch": epoch,
        "rng_state_digest": rng_digest(rng) if rng is not None else None,
        "training_only": [k for k in ("align_head", "token_pyramid", "classifier")
                          if blob.get(k) is not None],
    }
    _atomic_write(path + ".json", lambda tmp: _dump_json(sidecar, tmp))


def _dump_json(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_checkpoint(path: str) -> tuple[ReIDSystem, Config]:
    with open(path + ".json") as fh:
        sidecar = json.load(fh)
    config = Config.from_dict(sidecar["config"]).validate()
    ecfg_doc = dict(sidecar["encoder_cfg"])
    ecfg_doc["stage_channels"] = tuple(ecfg_doc["stage_channels"])
    ecfg = EncoderConfig(**ecfg_doc)
    blob = torch.load(path, map_location="cpu", weights_only=True)

    encoder = build_image_encoder(ecfg, (config.data.height, config.data.width))
    encoder.load_state_dict(blob["encoder"])
    classifier = None
    if blob.get("classifier") is not None:
        n = blob["classifier"]["fc.weight"].shape[0]
        classifier = IdentityClassifier(ecfg.embed_dim, n)
        classifier.load_state_dict(blob["classifier"])
    align_head = None
    if blob.get("align_head") is not None:
        if blob["align_head_kind"] == "FusionHead":
            if ecfg.variant == "vit":
                width = ecfg.stage_channels[-1]
                channels = (width, width, width)
            else:
                channels = tuple(ecfg.stage_channels)
            align_head = FusionHead(channels, ecfg.embed_dim)
        else:
            c4 = ecfg.stage_channels[-1]
            align_head = SingleStageAlignHead(c4, ecfg.embed_dim)
        align_head.load_state_dict(blob["align_head"])
    token_pyramid = None
    if blob.get("token_pyramid") is not None:
        token_pyramid = TokenPyramid(ecfg.stage_channels[-1])
        token_pyramid.load_state_dict(blob["token_pyramid"])

    system = ReIDSystem(encoder, None, classifier, align_head, token_pyramid,
                        ecfg.variant, frozenset(sidecar["flags"]))
    system.eval()
    return system, config


def encoder_digest(system_or_encoder) -> str:
    module = system_or_encoder
    if hasattr(module, "encoder"):
        module = module.encoder
    return parameter_digest(module)
