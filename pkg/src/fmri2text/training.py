"""Masked-token pretraining, Stage I alignment, Stage II instruction tuning
with domain adaptation, freeze auditing, checkpoints and run directories.

Run directory layout (all paths relative to the run root)::

    config.yaml                  first resolved config
    config/<command>.yaml        resolved config of every invocation
    dataset/                     exported dataset (synth-data)
    metrics.jsonl                {"stage", "step", "name", "value"} per line
    checkpoints/<stage>.pt       final checkpoint of each stage
    checkpoints/<stage>_step<k>.pt
    snapshots/<stage>.json       parameter-group checksums before/after + declared trainable set
    audit/consumption.json       subjects consumed by every training phase
    audit/leak.json              reads of protected target samples
    records.jsonl, report.tsv, report.txt, eval.json
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from fmri2text import data as D
from fmri2text.adaptors import AdaptorPolicy, insert_adaptors
from fmri2text.config import config_hash, dump_config
from fmri2text.data import Dataset, SubjectSplit, batch_at
from fmri2text.decoder import (CaptionError, CaptionOracle, DecoderConfig, ToyDecoder, Vocab,
                               assemble_prompt, collate, generate_batch, normalize_text)
from fmri2text.domain_adaptation import ClassifierHead, DAConfig, MemoryPool, es_loss, nc_loss, update_memory
from fmri2text.encoders import EncoderConfig, FmriEncoder, MaskingPlan, QFormer, VideoEncoder, mae_pretrain_step, suspend_adaptors
from fmri2text.evaluation import DecodeRecord, TableEmbedder, build_report, rouge_l
from fmri2text.losses import Temperature, ce_loss, clip_loss, recon_l2l1_loss, stage1_total, stage2_total, token_accuracy
from fmri2text.numerics import ValidationError, checksum, derive_rng, derive_seed
from fmri2text.tokenizer import SpatioTemporalTokenizer, TokenizerConfig

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run directory

class RunDir:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def log_metrics(self, stage: str, step: int, values: dict[str, float]) -> None:
        with open(self.path("metrics.jsonl"), "a") as fh:
            for name, value in values.items():
                fh.write(json.dumps({"stage": stage, "step": step, "name": name, "value": float(value)}) + "\n")

    def write_json(self, rel: str, obj) -> Path:
        p = self.path(rel)
        p.write_text(json.dumps(obj, indent=1, sort_keys=True))
        return p

    def read_json(self, rel: str):
        return json.loads((self.root / rel).read_text())

    def write_config(self, cfg: dict, command: str) -> None:
        if not (self.root / "config.yaml").exists():
            self.path("config.yaml").write_text(dump_config(cfg))
        self.path("config", f"{command}.yaml").write_text(dump_config(cfg))


def read_metrics(run_root, stage: str | None = None, name: str | None = None) -> list[dict]:
    path = Path(run_root) / "metrics.jsonl"
    rows = [json.loads(l) for l in path.read_text().splitlines()] if path.exists() else []
    return [r for r in rows if (stage is None or r["stage"] == stage) and (name is None or r["name"] == name)]


# ---------------------------------------------------------------------------
# models

@dataclass
class DataMeta:
    grid: tuple[int, int, int]
    frames_T: int
    video_shape: tuple[int, int, int, int]
    n_classes: int
    class_names: list[str]

    @classmethod
    def of(cls, ds: Dataset) -> "DataMeta":
        return cls(ds.grid, ds.frames_T, ds.video_shape, ds.n_classes, list(ds.class_names))


class System(nn.Module):
    """Every model of the pipeline plus the adaptor bank, as one module tree.

    Parameter groups (the unit of freezing and auditing): tokenizer,
    fmri_encoder, video_encoder, qformer, video_proj, video_head, decoder,
    head, tau, adaptors.fmri_encoder, adaptors.qformer, adaptors.projection.
    """

    BASE_GROUPS = ("tokenizer", "fmri_encoder", "video_encoder", "qformer", "video_proj", "video_head", "decoder", "head")

    def __init__(self, cfg: dict, meta: DataMeta):
        super().__init__()
        torch.manual_seed(derive_seed(cfg["seed"], "init"))
        self.meta = meta
        enc = EncoderConfig(**cfg["encoders"])
        tcfg = TokenizerConfig(**cfg["tokenizer"])
        dcfg = DecoderConfig(**cfg["decoder"])
        s1 = cfg["stage1"]
        F_, H, W, C = meta.video_shape
        if H != W:
            raise ValidationError("video frames must be square")
        self.vocab = Vocab.default()
        self.tokenizer = SpatioTemporalTokenizer(tcfg, meta.frames_T, meta.grid)
        self.fmri_encoder = FmriEncoder(enc, tcfg.out_channels, self.tokenizer.n_tokens)
        self.video_encoder = VideoEncoder(enc, F_, H, C)
        self.qformer = QFormer(enc)
        self.video_proj = nn.Linear(enc.width, dcfg.width)
        self.video_head = nn.Linear(enc.width, meta.n_classes)
        self.decoder = ToyDecoder(dcfg, len(self.vocab))
        self.tau = Temperature(s1["tau_clip"], s1["tau_min"], s1["tau_max"], learnable=s1["learn_tau"])
        self.head = ClassifierHead(dcfg.width, meta.n_classes, cfg["da"]["head_temperature"])
        a = cfg["adaptors"]
        policy = AdaptorPolicy(
            modules=tuple(a["modules"]), sites=tuple(a["sites"]), rank=a["rank"], scale=a["scale"],
            activation=a["activation"],
            projection=dict(width=enc.width, hidden=a["projection_hidden"], out_width=dcfg.width,
                            in_tokens=self.tokenizer.n_tokens, out_tokens=enc.n_queries),
        )
        self.bank = insert_adaptors(self, policy)

    def insertion_sites(self) -> dict[str, list[nn.Module]]:
        return {"fmri_encoder": list(self.fmri_encoder.blocks), "qformer": list(self.qformer.blocks)}

    def groups(self) -> dict[str, list[nn.Parameter]]:
        out = {name: list(getattr(self, name).parameters()) for name in self.BASE_GROUPS}
        out["tau"] = [self.tau.value]
        out.update(self.bank.groups())
        return out

    def group_checksums(self) -> dict[str, str]:
        return {name: checksum(params) for name, params in sorted(self.groups().items())}

    def set_trainable(self, names: Iterable[str]) -> list[nn.Parameter]:
        groups = self.groups()
        names = list(names)
        unknown = [n for n in names if n not in groups]
        if unknown:
            raise ValidationError(f"unknown parameter groups {unknown}")
        for p in self.parameters():
            p.requires_grad_(False)
        params = []
        for n in names:
            for p in groups[n]:
                p.requires_grad_(True)
                params.append(p)
        return params

    # pathways ---------------------------------------------------------------

    def fmri_latent(self, voxels: torch.Tensor) -> torch.Tensor:
        return self.fmri_encoder(self.tokenizer(voxels))

    def fmri_media(self, latent: torch.Tensor) -> torch.Tensor:
        return self.bank.projection(latent)

    def video_media(self, queries: torch.Tensor) -> torch.Tensor:
        return self.video_proj(queries)


# ---------------------------------------------------------------------------
# freeze audit

@dataclass
class FreezeAudit:
    declared: list[str]
    changed: list[str]
    unchanged: list[str]

    @property
    def violations(self) -> list[str]:
        return [g for g in self.changed if g not in self.declared]

    @property
    def passed(self) -> bool:
        return not self.violations

    def lines(self) -> list[str]:
        out = [f"{'changed' if g in self.changed else 'unchanged'}: {g}" for g in sorted(self.changed + self.unchanged)]
        out += [f"VIOLATION: frozen group {g} changed" for g in self.violations]
        return out


def freeze_audit(before: dict[str, str], after: dict[str, str], declared: Iterable[str]) -> FreezeAudit:
    changed = sorted(g for g in before if before[g] != after.get(g))
    unchanged = sorted(g for g in before if before[g] == after.get(g))
    return FreezeAudit(sorted(declared), changed, unchanged)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, ctx: "Context", stage: str, step: int, optimizer=None, scheduler=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "stage": stage,
        "step": step,
        "config_hash": config_hash(ctx.cfg),
        "system": ctx.system.state_dict(),
        "groups": {name: ("trainable" if any(p.requires_grad for p in ps) else "frozen")
                   for name, ps in ctx.system.groups().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "pool": ctx.pool.state_dict() if ctx.pool is not None else None,
    }, path)
    return path


def load_checkpoint(path, ctx: "Context") -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    ctx.system.load_state_dict(state["system"])
    ctx.pool = MemoryPool.from_state_dict(state["pool"]) if state.get("pool") else None
    ctx.invalidate()
    return state


# ---------------------------------------------------------------------------
# context

@dataclass
class Context:
    cfg: dict
    dataset: Dataset
    split: SubjectSplit
    system: System
    run: RunDir | None = None
    pool: MemoryPool | None = None
    consumed: dict[str, Counter] = field(default_factory=dict)
    caption_provider: Callable[[dict], dict] | None = None
    _patch_cache: torch.Tensor | None = None
    _latent_cache: torch.Tensor | None = None

    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.cfg["dtype"]]

    @property
    def oracle(self) -> CaptionOracle:
        return CaptionOracle(self.dataset.class_names, mode=self.cfg["stage2"]["caption_mode"],
                             provider=self.caption_provider)

    @property
    def instructions(self) -> list[str]:
        return D.InstructionSet().instructions

    def invalidate(self) -> None:
        self._latent_cache = None

    def fmri(self, idx) -> torch.Tensor:
        return torch.from_numpy(self.dataset.fmri(idx)).to(self.dtype)

    def consume(self, phase: str, idx) -> None:
        self.consumed.setdefault(phase, Counter()).update(self.dataset.subjects(idx).tolist())

    def log(self, stage: str, step: int, values: dict) -> None:
        if self.run is not None:
            self.run.log_metrics(stage, step, values)

    def flush_audit(self) -> None:
        if self.run is None:
            return
        self.run.write_json("audit/consumption.json", {k: dict(v) for k, v in self.consumed.items()})
        self.run.write_json("audit/leak.json", {
            "protected": len(self.dataset.audit.protected),
            "violations": [{"field": f, "samples": list(s)} for f, s in self.dataset.audit.violations],
        })

    # cached frozen features ---------------------------------------------------

    def readable_video_indices(self) -> np.ndarray:
        return np.setdiff1d(np.arange(len(self.dataset)), self.split.target_adapt)

    @torch.no_grad()
    def patch_tokens(self, idx) -> torch.Tensor:
        """Frozen video-encoder patch tokens; never computed for the target adaptation pool."""
        if self._patch_cache is None:
            ok = self.readable_video_indices()
            enc = self.system.video_encoder
            cache = torch.zeros((len(self.dataset), enc.n_tokens, enc.pos.shape[1]), dtype=self.dtype)
            for chunk in np.array_split(ok, max(1, len(ok) // 64)):
                frames = torch.from_numpy(self.dataset.videos(chunk)).to(self.dtype)
                cache[chunk] = enc(frames)
            self._patch_cache = cache
        return self._patch_cache[idx]

    @torch.no_grad()
    def fmri_latents(self, idx) -> torch.Tensor:
        """fMRI-encoder outputs with current adaptors; valid while tokenizer
        and encoder adaptors stay frozen (Stage II and evaluation)."""
        if self._latent_cache is None:
            n = len(self.dataset)
            chunks = np.array_split(np.arange(n), max(1, n // 64))
            self._latent_cache = torch.cat([self.system.fmri_latent(self.fmri(c)) for c in chunks])
        return self._latent_cache[idx]


def make_context(cfg: dict, run: RunDir | None = None, dataset: Dataset | None = None) -> Context:
    torch.use_deterministic_algorithms(True)
    if dataset is None:
        dataset = load_dataset(cfg, run)
    d = cfg["data"]
    split = D.make_split(dataset, d["n_target_subjects"], d["target_adaptation_fraction"],
                         d["source_holdout_fraction"], seed=cfg["seed"])
    dataset.protect(split.target_adapt)
    system = System(cfg, DataMeta.of(dataset)).to(DTYPES[cfg["dtype"]])
    return Context(cfg, dataset, split, system, run)


def synthetic_config(cfg: dict) -> D.SyntheticConfig:
    d = cfg["data"]
    return D.SyntheticConfig(
        n_subjects=d["n_subjects"], samples_per_subject=d["samples_per_subject"], n_classes=d["n_classes"],
        grid=tuple(d["grid"]), frames_T=d["frames_T"], video_frames=d["video_frames"], video_size=d["video_size"],
        video_channels=d["video_channels"], noise=d["noise"], stimulus_jitter=d["stimulus_jitter"],
        nuisance=d["nuisance"], video_noise=d["video_noise"],
    )


def load_dataset(cfg: dict, run: RunDir | None = None) -> Dataset:
    if run is not None and (run.root / "dataset" / "manifest.json").exists():
        return D.load_real_dataset(run.root / "dataset")[0]
    if cfg["data"]["path"]:
        return D.load_real_dataset(cfg["data"]["path"])[0]
    return D.generate_synthetic_dataset(synthetic_config(cfg), cfg["seed"])


# ---------------------------------------------------------------------------
# optimisation helpers

def make_optimizer(groups: list[dict], steps: int, weight_decay: float):
    opt = torch.optim.AdamW(groups, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, steps) / max(steps, 1))))
    return opt, sched


def _check_finite(ctx: Context, stage: str, step: int, loss: torch.Tensor, **tensors) -> None:
    if torch.isfinite(loss):
        return
    dump = None
    if ctx.run is not None:
        dump = ctx.run.path(f"nan_dump_{stage}_{step}.pt")
        torch.save({k: v.detach() if isinstance(v, torch.Tensor) else v for k, v in tensors.items()}, dump)
    raise TrainingError(f"{stage}: non-finite loss at step {step}" + (f"; batch dumped to {dump}" if dump else ""))


def _snapshot(ctx: Context, stage: str, before: dict, declared: Sequence[str]) -> FreezeAudit:
    after = ctx.system.group_checksums()
    audit = freeze_audit(before, after, declared)
    if ctx.run is not None:
        ctx.run.write_json(f"snapshots/{stage}.json", {"before": before, "after": after, "declared": list(declared)})
    ctx.flush_audit()
    return audit


def _caption_batch(ctx: Context, idx: np.ndarray, instructions: Sequence[str], window: deque) -> tuple[list[int], list[str]]:
    """Surrogate captions for source samples; failures are skipped and counted."""
    labels = ctx.dataset.labels(idx)
    oracle = ctx.oracle
    keep, caps = [], []
    s2 = ctx.cfg["stage2"]
    for k, (c, ins) in enumerate(zip(labels, instructions)):
        frames = ctx.dataset.videos(idx[k]) if oracle.mode == "external" else None
        try:
            caps.append(oracle.caption(int(c), ins, frames))
            keep.append(k)
            window.append(0)
        except CaptionError as err:
            log.warning("caption oracle failed for sample %d: %s", int(idx[k]), err)
            window.append(1)
    if len(window) == window.maxlen and sum(window) / len(window) > s2["max_caption_failure_rate"]:
        raise TrainingError(f"caption oracle failure rate {sum(window) / len(window):.0%} exceeds limit")
    return keep, caps


# ---------------------------------------------------------------------------
# pretraining

def pretrain(ctx: Context) -> dict[str, float]:
    """Masked-token pretraining of the fMRI encoder, supervised warm-up of the
    video encoder + query transformer, and captioning pretraining of the
    decoder on video media. Every base model is frozen afterwards."""
    before = ctx.system.group_checksums()
    p = ctx.cfg["pretrain"]
    out = {}
    with suspend_adaptors(ctx.system):
        out["mae_final"] = _pretrain_mae(ctx, p["mae_steps"])
        out["video_warmup_final"] = _warmup_video(ctx, p["video_warmup_steps"])
        out["decoder_final"] = _pretrain_decoder(ctx, p["decoder_steps"])
    declared = ["fmri_encoder", "video_encoder", "qformer", "video_head", "decoder", "video_proj"]
    ctx.system.set_trainable([])
    _snapshot(ctx, "pretrain", before, declared)
    if ctx.run is not None:
        save_checkpoint(ctx.run.path("checkpoints", "pretrain.pt"), ctx, "pretrain", sum(
            ctx.cfg["pretrain"][k] for k in ("mae_steps", "video_warmup_steps", "decoder_steps")))
    return out


def _pretrain_mae(ctx: Context, steps: int) -> float:
    sysm, p = ctx.system, ctx.cfg["pretrain"]
    params = sysm.set_trainable(["fmri_encoder"])
    opt, sched = make_optimizer([{"params": params, "lr": p["lr"]}], steps, ctx.cfg["optim"]["weight_decay"])
    train = ctx.split.source_train
    with torch.no_grad():
        tokens = torch.cat([sysm.tokenizer(ctx.fmri(c)) for c in np.array_split(train, max(1, len(train) // 64))])
    plan = MaskingPlan(p["mask_ratio"])
    loss = float("nan")
    for step in range(steps):
        rows = batch_at(np.arange(len(train)), min(p["batch_size"], len(train)), ctx.seed, "mae", step)
        ctx.consume("pretrain", train[rows])
        loss = mae_pretrain_step(tokens[rows], plan, sysm.fmri_encoder, opt, derive_rng(ctx.seed, "mae-mask", step))
        sched.step()
        if not math.isfinite(loss):
            raise TrainingError(f"mae: non-finite loss at step {step}")
        ctx.log("mae", step, {"mae_loss": loss})
    return loss


def _warmup_video(ctx: Context, steps: int) -> float:
    sysm, p = ctx.system, ctx.cfg["pretrain"]
    params = sysm.set_trainable(["video_encoder", "qformer", "video_head"])
    opt, sched = make_optimizer([{"params": params, "lr": p["lr"]}], steps, ctx.cfg["optim"]["weight_decay"])
    train = ctx.split.source_train
    loss = torch.tensor(float("nan"))
    for step in range(steps):
        idx = batch_at(train, min(p["batch_size"], len(train)), ctx.seed, "video-warmup", step)
        ctx.consume("pretrain", idx)
        frames = torch.from_numpy(ctx.dataset.videos(idx)).to(ctx.dtype)
        labels = torch.from_numpy(ctx.dataset.labels(idx))
        logits = sysm.video_head(sysm.qformer(sysm.video_encoder(frames)).mean(1))
        loss = F.cross_entropy(logits, labels)
        _check_finite(ctx, "video_warmup", step, loss, idx=idx)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        ctx.log("video_warmup", step, {"ce": float(loss.detach()), "acc": float((logits.argmax(-1) == labels).double().mean())})
    sysm.set_trainable([])
    ctx._patch_cache = None
    return loss.item()


def _pretrain_decoder(ctx: Context, steps: int) -> float:
    sysm, p = ctx.system, ctx.cfg["pretrain"]
    train = ctx.split.source_train
    sysm.set_trainable([])
    with torch.no_grad():
        queries = sysm.qformer(ctx.patch_tokens(train))
    params = sysm.set_trainable(["decoder", "video_proj"])
    opt, sched = make_optimizer([{"params": params, "lr": p["lr"]}], steps, ctx.cfg["optim"]["weight_decay"])
    window: deque = deque(maxlen=ctx.cfg["stage2"]["failure_window"])
    instr = ctx.instructions
    loss = torch.tensor(float("nan"))
    for step in range(steps):
        rows = batch_at(np.arange(len(train)), min(p["batch_size"], len(train)), ctx.seed, "decoder", step)
        idx = train[rows]
        ctx.consume("pretrain", idx)
        ins = [instr[k] for k in derive_rng(ctx.seed, "decoder-instr", step).integers(len(instr), size=len(idx))]
        keep, caps = _caption_batch(ctx, idx, ins, window)
        if not keep:
            continue
        media = sysm.video_media(queries[rows[keep]])
        prompts = [assemble_prompt(m, ins[k], c, sysm.vocab) for m, k, c in zip(media, keep, caps)]
        m, ids, tgt, mask = collate(prompts, sysm.vocab.pad)
        logits = sysm.decoder(m, ids)
        loss = ce_loss(logits, tgt, mask)
        _check_finite(ctx, "decoder_pretrain", step, loss, idx=idx)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        ctx.log("decoder_pretrain", step, {"ce": loss.item(), "ce_token": float(ce_loss(logits.detach(), tgt, mask, "token")),
                                           "token_acc": token_accuracy(logits.detach(), tgt, mask)})
    sysm.set_trainable([])
    return loss.item()


# ---------------------------------------------------------------------------
# Stage I

def stage1_trainable(cfg: dict) -> list[str]:
    names = ["tokenizer", "adaptors.fmri_encoder", "adaptors.qformer", "adaptors.projection"]
    if cfg["stage1"]["learn_tau"]:
        names.append("tau")
    return names


def run_stage1(ctx: Context, steps: int | None = None, resume=None, stop_after: int | None = None) -> dict:
    """Contrastive + reconstruction alignment of fMRI to video.

    Per step: video patches -> query transformer (with adaptors) give the video
    embedding (query mean) and the reconstruction target (video media);
    fMRI -> tokenizer -> encoder (with adaptors) gives the fMRI embedding
    (token mean) and, through the projection adaptor, fMRI media tokens.
    """
    cfg, sysm = ctx.cfg, ctx.system
    s1 = cfg["stage1"]
    steps = s1["steps"] if steps is None else steps
    declared = stage1_trainable(cfg)
    before = ctx.system.group_checksums()
    sysm.set_trainable(declared)
    groups = sysm.groups()
    adaptor_params = [p for n in declared if n not in ("tokenizer",) for p in groups[n]]
    opt, sched = make_optimizer([
        {"params": adaptor_params, "lr": s1["lr_adaptor"]},
        {"params": groups["tokenizer"], "lr": s1["lr_tokenizer"]},
    ], steps, cfg["optim"]["weight_decay"])
    start = 0
    if resume is not None:
        state = load_checkpoint(resume, ctx)
        before = state.get("before", before)
        opt.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        start = state["step"]
    every = cfg["optim"]["checkpoint_every"]
    B = s1["batch_size"]
    train = ctx.split.source_train
    last = {}
    end = steps if stop_after is None else min(steps, stop_after)
    for step in range(start, end):
        idx = batch_at(train, B, ctx.seed, "stage1", step)
        ctx.consume("stage1", idx)
        queries = sysm.qformer(ctx.patch_tokens(idx))
        z_video = queries.mean(1)
        x_media = sysm.video_media(queries).detach()
        latent = sysm.fmri_latent(ctx.fmri(idx))
        z_fmri = latent.mean(1)
        z_media = sysm.fmri_media(latent)
        tau = sysm.tau()
        l_clip = clip_loss(z_fmri, z_video, tau)
        l_rec = recon_l2l1_loss(x_media, z_media, s1["alpha"])
        total = stage1_total(l_clip, l_rec, s1["beta"])
        _check_finite(ctx, "stage1", step, total, idx=idx, z_fmri=z_fmri, z_video=z_video)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        sched.step()
        last = {"clip": l_clip.item(), "recon": l_rec.item(), "total": total.item(), "tau": tau.item()}
        ctx.log("stage1", step, last)
        if ctx.run is not None and every and (step + 1) % every == 0 and step + 1 < steps:
            _save_stage(ctx, "stage1", step + 1, opt, sched, before, f"stage1_step{step + 1}.pt")
    ctx.invalidate()
    audit = _snapshot(ctx, "stage1", before, declared)
    if ctx.run is not None:
        _save_stage(ctx, "stage1", end, opt, sched, before, "stage1.pt")
    sysm.set_trainable([])
    return {"last": last, "audit": audit}


def _save_stage(ctx, stage, step, opt, sched, before, name):
    path = save_checkpoint(ctx.run.path("checkpoints", name), ctx, stage, step, opt, sched)
    state = torch.load(path, weights_only=False)
    state["before"] = before
    torch.save(state, path)


# ---------------------------------------------------------------------------
# Stage II

def stage2_trainable(cfg: dict) -> list[str]:
    return ["adaptors.projection", "head"]


@torch.no_grad()
def pooled_media_features(ctx: Context, idx) -> torch.Tensor:
    return F.normalize(ctx.system.fmri_media(ctx.fmri_latents(idx)).mean(1), dim=-1)


@torch.no_grad()
def init_domain_adaptation(ctx: Context) -> None:
    """Memory pool from the adaptation pool's fMRI features; head prototypes
    from per-class means of source video media."""
    adapt = ctx.split.target_adapt
    ctx.pool = MemoryPool(adapt, pooled_media_features(ctx, adapt))
    train = ctx.split.source_train
    video = F.normalize(ctx.system.video_media(ctx.system.qformer(ctx.patch_tokens(train))).mean(1), dim=-1)
    ctx.system.head.init_from_means(video, torch.from_numpy(ctx.dataset.labels(train)))


def run_stage2(ctx: Context, steps: int | None = None, train_indices: np.ndarray | None = None) -> dict:
    """Instruction tuning of the projection adaptor on surrogate captions,
    combined with neighborhood clustering + entropy separation on target
    features. Source and target batches share each update."""
    cfg, sysm = ctx.cfg, ctx.system
    s2, da = cfg["stage2"], DAConfig(**cfg["da"])
    lam = s2["lambda"]
    steps = s2["steps"] if steps is None else steps
    train = ctx.split.source_train if train_indices is None else np.asarray(train_indices)
    B = min(s2["batch_size"], len(train))
    sysm.set_trainable([])
    ctx.invalidate()
    init_domain_adaptation(ctx)
    before = sysm.group_checksums()
    pool_before = checksum(ctx.pool.features)
    declared = stage2_trainable(cfg)
    params = sysm.set_trainable(declared)
    opt, sched = make_optimizer([{"params": params, "lr": s2["lr"]}], steps, cfg["optim"]["weight_decay"])
    rho = da.rho_for(ctx.dataset.n_classes)
    window: deque = deque(maxlen=s2["failure_window"])
    instr = ctx.instructions
    adapt = ctx.split.target_adapt
    Bt = min(s2["batch_size"], len(adapt))
    last = {}
    for step in range(steps):
        idx = batch_at(train, B, ctx.seed, "stage2-source", step)
        ctx.consume("stage2", idx)
        ins = [instr[k] for k in derive_rng(ctx.seed, "stage2-instr", step).integers(len(instr), size=len(idx))]
        keep, caps = _caption_batch(ctx, idx, ins, window)
        if not keep:
            continue
        media = sysm.fmri_media(ctx.fmri_latents(idx[keep]))
        prompts = [assemble_prompt(m, ins[k], c, sysm.vocab) for m, k, c in zip(media, keep, caps)]
        m, ids, tgt, mask = collate(prompts, sysm.vocab.pad)
        logits = sysm.decoder(m, ids)
        l_ce = ce_loss(logits, tgt, mask)
        values = {"ce": l_ce.item(), "ce_token": float(ce_loss(logits.detach(), tgt, mask, "token"))}
        if lam < 1:
            tidx = batch_at(adapt, Bt, ctx.seed, "stage2-target", step)
            ctx.consume("stage2_target_fmri", tidx)
            f = F.normalize(sysm.fmri_media(ctx.fmri_latents(tidx)).mean(1), dim=-1)
            l_nc = nc_loss(f, tidx, ctx.pool, sysm.head, da.tau_nc)
            l_es = es_loss(sysm.head.probs(f), rho, da.margin)
            l_da = l_nc + l_es
            values.update(nc=l_nc.item(), es=l_es.item())
        else:
            l_da = torch.zeros((), dtype=ctx.dtype)
        total = stage2_total(l_ce, l_da, lam)
        _check_finite(ctx, "stage2", step, total, idx=idx)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        sched.step()
        if lam < 1:
            update_memory(ctx.pool, tidx, f.detach())
        values["total"] = total.item()
        last = values
        ctx.log("stage2", step, values)
    audit = _snapshot(ctx, "stage2", before, declared)
    if ctx.run is not None:
        save_checkpoint(ctx.run.path("checkpoints", "stage2.pt"), ctx, "stage2", steps)
    sysm.set_trainable([])
    return {"last": last, "audit": audit, "pool_unchanged": checksum(ctx.pool.features) == pool_before}


# ---------------------------------------------------------------------------
# evaluation

def retrieval_top1(a: torch.Tensor, b: torch.Tensor, batch_size: int = 16) -> float:
    """Mean top-1 accuracy of matching row i of ``a`` to row i of ``b`` within
    consecutive batches (a trailing short batch is dropped)."""
    n = (a.shape[0] // batch_size) * batch_size
    if n == 0:
        raise ValidationError("not enough samples for one retrieval batch")
    hits = 0
    for s in range(0, n, batch_size):
        sim = F.normalize(a[s:s + batch_size], dim=-1) @ F.normalize(b[s:s + batch_size], dim=-1).T
        hits += int((sim.argmax(1) == torch.arange(sim.shape[0])).sum())
    return hits / n


@torch.no_grad()
def retrieval_scores(ctx: Context, idx: np.ndarray) -> dict[str, float]:
    bs = ctx.cfg["eval"]["retrieval_batch"]
    order = derive_rng(ctx.seed, "retrieval").permutation(idx)
    sysm = ctx.system
    latent = ctx.fmri_latents(order)
    queries = sysm.qformer(ctx.patch_tokens(order))
    return {
        "encoder": retrieval_top1(latent.mean(1), queries.mean(1), bs),
        "media": retrieval_top1(sysm.fmri_media(latent).mean(1), sysm.video_media(queries).mean(1), bs),
    }


@torch.no_grad()
def decode(ctx: Context, idx: np.ndarray) -> list[DecodeRecord]:
    """Greedy generations from fMRI media with template-oracle references."""
    sysm = ctx.system
    instr = ctx.instructions
    choice = derive_rng(ctx.seed, "eval-instr").integers(len(instr), size=len(ctx.dataset))
    records: dict[int, DecodeRecord] = {}
    labels = ctx.dataset.labels(idx)
    subjects = ctx.dataset.subjects(idx)
    for k, ins in enumerate(instr):
        sel = [j for j, i in enumerate(idx) if choice[i] == k]
        if not sel:
            continue
        media = sysm.fmri_media(ctx.fmri_latents(idx[sel]))
        outs = generate_batch(media, ins, sysm.decoder, sysm.vocab)
        for j, out in zip(sel, outs):
            records[j] = DecodeRecord(str(subjects[j]), ins, ctx.oracle.caption(int(labels[j]), ins), out.text,
                                      out.truncated, int(idx[j]))
    return [records[j] for j in range(len(idx))]


def embedder_for(system: System) -> TableEmbedder:
    table = system.decoder.embed.weight.detach().to(torch.float64).numpy()
    return TableEmbedder(system.vocab.stoi, table, system.vocab.unk)


def exact_match(records: Sequence[DecodeRecord]) -> float:
    return sum(normalize_text(r.hypothesis) == normalize_text(r.reference) for r in records) / max(len(records), 1)


def evaluate(ctx: Context) -> dict:
    """Retrieval on held-out source and target-test samples, caption decoding,
    metric report (written to the run directory when present)."""
    sp = ctx.split
    result = {
        "retrieval": {"source_holdout": retrieval_scores(ctx, sp.source_holdout),
                      "target_test": retrieval_scores(ctx, sp.target_test)},
    }
    src = decode(ctx, sp.source_holdout)
    tgt = decode(ctx, sp.target_test)
    records = src + tgt
    report = build_report(records, embedder_for(ctx.system))
    report.notes.append("Target subjects: " + ", ".join(sp.target_subjects))
    result["rouge_l_f"] = {"source_holdout": rouge_l(src)[0], "target_test": rouge_l(tgt)[0]}
    result["exact_match"] = {"source_holdout": exact_match(src), "target_test": exact_match(tgt)}
    if ctx.run is not None:
        with open(ctx.run.path("records.jsonl"), "w") as fh:
            for r in records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        report.write(ctx.run.root)
        ctx.run.write_json("eval.json", result)
    result["report"] = report
    return result


def run_pipeline(cfg: dict, run_root=None, dataset: Dataset | None = None) -> tuple[Context, dict]:
    run = RunDir(run_root) if run_root is not None else None
    if run is not None:
        run.write_config(cfg, "pipeline")
    ctx = make_context(cfg, run, dataset)
    pretrain(ctx)
    run_stage1(ctx)
    run_stage2(ctx)
    return ctx, evaluate(ctx)
