"""Deterministic pre-training loop.

Preparation: decode the manifest, compute log-mel features, fit global
normalization statistics on the training split, and quantize every utterance
once with the frozen bank. Each step then masks its batch with seeds derived
from (run seed, step, position), runs the encoder, and applies one clipped Adam
update. Step ``s`` of the run always sees the same batch, masks, noise and
dropout, which is what makes resume-at-k identical to an uninterrupted run.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .audio import ManifestEntry, Waveform, load_corpus
from .checkpoint import (
    Checkpoint,
    encoder_parameters,
    load_checkpoint,
    load_optimizer_tensors,
    optimizer_tensors,
    save_checkpoint,
)
from .clustering import ClusterModel, CodebookWeights, assign, codebook_weights, uniform_weights
from .config import ConfigError, RunConfig
from .encoder import Encoder, backward, build_encoder, forward
from .features import (
    FeatureKind,
    FeatureSequence,
    NormStats,
    compute_norm_stats,
    extract_many,
    log_mel,
    normalize_global,
    utterance_summary,
)
from .losses import LossReport, combined_loss, masked_accuracy
from .masking import apply_mask, project_mask, sample_mask
from .quantizer import QuantizerBank, init_bank, quantize, similarity_distribution
from .seeding import STREAM_BATCHES, STREAM_DROPOUT, STREAM_SPLIT, STREAM_VAL_MASK, derive_seed, make_rng

log = logging.getLogger(__name__)

METRICS_NAME = "metrics.jsonl"
FINAL_CHECKPOINT_NAME = "final.brq"


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, batch_ids: Sequence[str]):
        self.step = step
        self.batch_ids = list(batch_ids)
        super().__init__(f"non-finite loss at step {step}; batch: {', '.join(self.batch_ids)}")


class EmptyValidationError(ValueError):
    pass


_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def torch_dtype(name: str) -> torch.dtype:
    return _DTYPES[name]


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    features: FeatureSequence  # globally normalized log-mel
    targets: np.ndarray  # (N, T')
    projected: np.ndarray  # (N, T', d)
    cluster: int | None = None

    @property
    def num_frames(self) -> int:
        return self.features.num_frames


@dataclass
class PreparedData:
    train: list[Utterance]
    val: list[Utterance]
    norm_stats: NormStats
    bank: QuantizerBank
    cluster_model: ClusterModel | None = None


def split_ids(ids: Sequence[str], val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Seeded held-out split; both parts keep manifest order."""
    n = len(ids)
    n_val = 0
    if val_fraction > 0 and n >= 2:
        n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    held = set(make_rng(seed, STREAM_SPLIT).permutation(n)[:n_val].tolist())
    train = [u for i, u in enumerate(ids) if i not in held]
    val = [u for i, u in enumerate(ids) if i in held]
    return train, val


def resolve_clusters(
    corpus: Sequence[tuple[ManifestEntry, Waveform]], model: ClusterModel, cfg: RunConfig
) -> dict[str, int]:
    """Cluster id per utterance: manifest field, then the model's stored assignment, then nearest centroid."""
    out: dict[str, int] = {}
    for entry, wave in corpus:
        if entry.cluster is not None:
            cluster = int(entry.cluster)
        elif entry.id in model.assignments:
            cluster = model.assignments[entry.id]
        else:
            cluster = assign(model, utterance_summary(wave, cfg.frame))
        if not 0 <= cluster < model.k:
            raise ValueError(f"utterance {entry.id!r} has cluster {cluster} outside [0, {model.k})")
        out[entry.id] = cluster
    return out


def check_cluster_model(cfg: RunConfig, cluster_model: ClusterModel | None) -> None:
    """One cluster per codebook; a model is mandatory only when cluster weighting is on."""
    if cluster_model is None:
        if cfg.loss.cluster_weighting:
            raise ConfigError("cluster weighting is on but no cluster model was given")
        return
    if cluster_model.k != cfg.quantizer.n_codebooks:
        raise ConfigError(
            f"cluster model has k={cluster_model.k} clusters but the run uses {cfg.quantizer.n_codebooks} codebooks"
        )


def build_utterances(
    corpus: Sequence[tuple[ManifestEntry, Waveform]],
    cfg: RunConfig,
    bank: QuantizerBank,
    stats: NormStats,
    clusters: dict[str, int] | None = None,
) -> list[Utterance]:
    mels = extract_many(lambda ew: log_mel(ew[1], cfg.frame), corpus, cfg.train.workers)
    return _quantized(corpus, mels, bank, stats, clusters)


def _quantized(
    corpus: Sequence[tuple[ManifestEntry, Waveform]],
    mels: Sequence[FeatureSequence],
    bank: QuantizerBank,
    stats: NormStats,
    clusters: dict[str, int] | None,
) -> list[Utterance]:
    out: list[Utterance] = []
    for (entry, _), mel in zip(corpus, mels):
        seq = normalize_global(mel, stats)
        targets, projected = quantize(bank, seq)
        out.append(
            Utterance(entry.id, seq, targets.indices, projected, None if clusters is None else clusters[entry.id])
        )
    return out


def prepare_data(
    cfg: RunConfig,
    manifest_path: str | Path,
    cluster_model: ClusterModel | None = None,
    norm_stats: NormStats | None = None,
) -> PreparedData:
    """Load, featurize, normalize and quantize a corpus.

    Statistics come from the training split unless ``norm_stats`` is given.
    """
    check_cluster_model(cfg, cluster_model)
    corpus = load_corpus(manifest_path)
    if not corpus:
        raise ValueError(f"manifest {manifest_path} has no entries")
    clusters = resolve_clusters(corpus, cluster_model, cfg) if cfg.loss.cluster_weighting else None

    train_ids, val_ids = split_ids([e.id for e, _ in corpus], cfg.train.val_fraction, cfg.train.seed)
    mels = extract_many(lambda ew: log_mel(ew[1], cfg.frame), corpus, cfg.train.workers)
    by_id = {e.id: i for i, (e, _) in enumerate(corpus)}
    if norm_stats is None:
        norm_stats = compute_norm_stats(mels[by_id[u]] for u in train_ids)

    bank = init_bank(cfg.quantizer_seed, **_bank_shape(cfg))
    utts = _quantized(corpus, mels, bank, norm_stats, clusters)
    held = set(val_ids)
    data = PreparedData(
        train=[u for u in utts if u.id not in held],
        val=[u for u in utts if u.id in held],
        norm_stats=norm_stats,
        bank=bank,
        cluster_model=cluster_model,
    )
    log.info("Prepared %d training and %d validation utterances", len(data.train), len(data.val))
    return data


def _bank_shape(cfg: RunConfig) -> dict[str, int]:
    s = cfg.quantizer_shape()
    return {
        "n_codebooks": s.n_codebooks,
        "codebook_size": s.codebook_size,
        "codebook_dim": s.codebook_dim,
        "stack_factor": s.stack_factor,
        "input_dim": s.input_dim,
    }


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def make_batches(utts: Sequence[Utterance], batch_size: int, by_cluster: bool = False) -> list[list[int]]:
    """Sort by (length, id) and chunk; with ``by_cluster`` every batch holds a single cluster."""
    order = sorted(range(len(utts)), key=lambda i: (utts[i].num_frames, utts[i].id))
    groups: list[list[int]]
    if by_cluster:
        clusters = sorted({utts[i].cluster for i in order})
        groups = [[i for i in order if utts[i].cluster == c] for c in clusters]
    else:
        groups = [order]
    return [g[j : j + batch_size] for g in groups for j in range(0, len(g), batch_size)]


def batch_for_step(batches: Sequence[Sequence[int]], step: int, seed: int) -> list[int]:
    """Batch of step ``step``; batch order is reshuffled every epoch from the run seed."""
    epoch, pos = divmod(step, len(batches))
    order = make_rng(seed, STREAM_BATCHES, epoch).permutation(len(batches))
    return list(batches[int(order[pos])])


@dataclass
class Batch:
    ids: list[str]
    features: torch.Tensor  # (B, T, F) masked inputs, zero padded
    lengths: torch.Tensor  # (B,)
    targets: torch.Tensor  # (N, B, T')
    target_mask: torch.Tensor  # (B, T') masked and not padding
    sim_dists: torch.Tensor | None  # (N, B, T', V)
    weights: CodebookWeights


def batch_weights(utts: Sequence[Utterance], cfg: RunConfig) -> CodebookWeights:
    n = cfg.quantizer.n_codebooks
    if not cfg.loss.cluster_weighting:
        return uniform_weights(n)
    clusters = {u.cluster for u in utts}
    if len(clusters) != 1 or None in clusters:
        raise ValueError(f"cluster-weighted batch must hold one cluster, got {sorted(map(str, clusters))}")
    return codebook_weights(int(clusters.pop()), n, cfg.loss.w_primary, cfg.loss.w_secondary)


def collate(
    utts: Sequence[Utterance],
    cfg: RunConfig,
    bank: QuantizerBank,
    sample_seeds: Sequence[int],
    dtype: torch.dtype = torch.float32,
) -> Batch:
    """Mask each utterance with its own seed and pad to the longest one."""
    s = bank.stack_factor
    n, v = bank.n_codebooks, bank.codebook_size
    b = len(utts)
    t_max = max(u.num_frames for u in utts)
    feats = np.zeros((b, t_max, bank.input_dim))
    targets = np.zeros((n, b, t_max // s), dtype=np.int64)
    tmask = np.zeros((b, t_max // s), dtype=bool)
    need_sims = cfg.loss.w_kl > 0
    sims = np.zeros((n, b, t_max // s, v)) if need_sims else None

    for i, (u, seed) in enumerate(zip(utts, sample_seeds)):
        mask = sample_mask(u.num_frames, cfg.mask.p_start, cfg.mask.span, seed)
        feats[i, : u.num_frames] = apply_mask(u.features, mask, seed, cfg.mask.noise_std).data
        tq = u.targets.shape[1]
        targets[:, i, :tq] = u.targets
        tmask[i, :tq] = project_mask(mask, s, cfg.mask.target_mode)
        if sims is not None:
            sims[:, i, :tq] = similarity_distribution(bank, u.projected, cfg.quantizer.temperature)

    return Batch(
        ids=[u.id for u in utts],
        features=torch.from_numpy(feats).to(dtype),
        lengths=torch.tensor([u.num_frames for u in utts], dtype=torch.long),
        targets=torch.from_numpy(targets),
        target_mask=torch.from_numpy(tmask),
        sim_dists=None if sims is None else torch.from_numpy(sims).to(dtype),
        weights=batch_weights(utts, cfg),
    )


# ---------------------------------------------------------------------------
# State and schedule
# ---------------------------------------------------------------------------


def learning_rate(step: int, lr_peak: float, warmup_steps: int) -> float:
    """Linear warmup to ``lr_peak`` at ``warmup_steps``, inverse square root decay after (1-based steps)."""
    s = max(int(step), 1)
    return lr_peak * min(s / warmup_steps, math.sqrt(warmup_steps / s))


@dataclass
class TrainState:
    cfg: RunConfig
    bank: QuantizerBank
    norm_stats: NormStats
    encoder: Encoder
    optimizer: torch.optim.Optimizer
    step: int = 0  # completed optimizer updates
    cluster_model: ClusterModel | None = None

    @property
    def dtype(self) -> torch.dtype:
        return torch_dtype(self.cfg.train.dtype)


def init_state(
    cfg: RunConfig, bank: QuantizerBank, norm_stats: NormStats, cluster_model: ClusterModel | None = None
) -> TrainState:
    encoder = build_encoder(cfg.encoder, cfg.train.seed, torch_dtype(cfg.train.dtype))
    optimizer = torch.optim.Adam(
        encoder.parameters(), lr=cfg.train.lr_peak, betas=cfg.train.adam_betas, eps=cfg.train.adam_eps
    )
    return TrainState(cfg, bank, norm_stats, encoder, optimizer, 0, cluster_model)


def to_checkpoint(state: TrainState, extra: dict[str, Any] | None = None) -> Checkpoint:
    return Checkpoint(
        config=state.cfg.to_dict(),
        encoder_config=state.cfg.encoder,
        parameters=encoder_parameters(state.encoder),
        step=state.step,
        norm_stats=state.norm_stats,
        quantizer=state.bank.to_dict(),
        optimizer_state=optimizer_tensors(state.encoder, state.optimizer),
        cluster_model=state.cluster_model,
        extra=extra or {},
    )


def restore_state(state: TrainState, ckpt: Checkpoint) -> TrainState:
    dtype = state.dtype
    params = {name: torch.from_numpy(np.array(arr)).to(dtype) for name, arr in ckpt.parameters.items()}
    state.encoder.load_state_dict(params)
    load_optimizer_tensors(state.encoder, state.optimizer, ckpt.optimizer_state)
    state.step = ckpt.step
    state.encoder.version = ckpt.step
    return state


def frozen_checksums(bank: QuantizerBank, stats: NormStats, cluster_model: ClusterModel | None) -> dict[str, str]:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(stats.mean).tobytes())
    h.update(np.ascontiguousarray(stats.std).tobytes())
    return {
        "quantizer": bank.checksum(),
        "norm_stats": h.hexdigest(),
        "centroids": cluster_model.checksum() if cluster_model is not None else "",
    }


# ---------------------------------------------------------------------------
# Step and validation
# ---------------------------------------------------------------------------


@dataclass
class StepOutput:
    report: LossReport
    accuracy: list[float]
    learning_rate: float
    grad_norm: float
    batch_ids: list[str] = field(default_factory=list)


def step_seeds(seed: int, step: int, n: int) -> list[int]:
    return [derive_seed(seed, step, i) for i in range(n)]


def pretrain_step(state: TrainState, utts: Sequence[Utterance]) -> tuple[TrainState, StepOutput]:
    """One masked-prediction update; everything random is derived from (seed, step)."""
    cfg = state.cfg
    seed, step = cfg.train.seed, state.step
    batch = collate(utts, cfg, state.bank, step_seeds(seed, step, len(utts)), state.dtype)
    lr = learning_rate(step + 1, cfg.train.lr_peak, cfg.train.warmup_steps)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    encoder = state.encoder
    encoder.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, STREAM_DROPOUT, step) % (2**63))
        result = forward(encoder, batch.features, batch.lengths)
    report = combined_loss(result.probs, batch.targets, batch.sim_dists, batch.target_mask, cfg.loss, batch.weights)
    if not math.isfinite(report.total):
        log.error("Non-finite loss at step %d; batch ids: %s", step, ", ".join(batch.ids))
        raise NonFiniteLossError(step, batch.ids)

    grads = backward(encoder, result, report.objective)
    params = dict(encoder.named_parameters())
    for name, g in grads.items():
        params[name].grad = g
    grad_norm = float(torch.nn.utils.clip_grad_norm_(list(params.values()), cfg.train.grad_clip_norm))
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    encoder.bump_version()
    state.step += 1

    accuracy = masked_accuracy(result.probs.detach(), batch.targets, batch.target_mask)
    report.objective = None
    return state, StepOutput(report, accuracy, lr, grad_norm, batch.ids)


@dataclass
class ValidationResult:
    report: LossReport
    accuracy: list[float]


def validation_seeds(seed: int, n: int) -> list[int]:
    return [derive_seed(seed, STREAM_VAL_MASK, i) for i in range(n)]


def validate(state: TrainState, utts: Sequence[Utterance]) -> ValidationResult:
    """Masked-position-weighted losses over the whole set with fixed masks; parameters are untouched.

    Per-codebook terms are pooled over every masked position; ``total`` and
    ``applied_weights`` are the masked-position-weighted means over batches.
    """
    if not utts:
        raise EmptyValidationError("validation set is empty")
    cfg = state.cfg
    n = cfg.quantizer.n_codebooks
    seeds = validation_seeds(cfg.train.seed, len(utts))
    seed_of = {u.id: s for u, s in zip(utts, seeds)}

    ce = np.zeros(n)
    kl = np.zeros(n)
    acc = np.zeros(n)
    w = np.zeros(n)
    total = 0.0
    count = 0
    kl_skipped = cfg.loss.w_kl == 0
    was_training = state.encoder.training
    state.encoder.eval()
    try:
        with torch.no_grad():
            for idx in make_batches(utts, cfg.train.batch_utterances, cfg.loss.cluster_weighting):
                group = [utts[i] for i in idx]
                batch = collate(group, cfg, state.bank, [seed_of[u.id] for u in group], state.dtype)
                result = forward(state.encoder, batch.features, batch.lengths)
                rep = combined_loss(
                    result.probs, batch.targets, batch.sim_dists, batch.target_mask, cfg.loss, batch.weights
                )
                m = rep.masked_positions
                ce += m * np.asarray(rep.ce_per_codebook)
                kl += m * np.asarray(rep.kl_per_codebook)
                acc += m * np.asarray(masked_accuracy(result.probs, batch.targets, batch.target_mask))
                w += m * np.asarray(rep.applied_weights)
                total += m * rep.total
                count += m
    finally:
        state.encoder.train(was_training)

    denom = max(count, 1)
    report = LossReport(
        ce_per_codebook=(ce / denom).tolist(),
        kl_per_codebook=(kl / denom).tolist(),
        applied_weights=(w / denom).tolist() if count else [1.0] * n,
        total=total / denom,
        masked_positions=count,
        kl_skipped=kl_skipped,
    )
    return ValidationResult(report, (acc / denom).tolist())


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    phase: str
    step: int
    learning_rate: float | None
    report: LossReport
    accuracy: list[float]
    grad_norm: float | None = None
    wall_ms: float | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"phase": self.phase, "step": self.step, "learning_rate": self.learning_rate}
        d.update(self.report.to_dict())
        d["accuracy"] = self.accuracy
        d["grad_norm"] = self.grad_norm
        d["wall_ms"] = self.wall_ms
        return d


def read_metrics(path: str | Path) -> list[dict[str, Any]]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"metrics log not found: {p}")
    return [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]


def _is_scheduled_validation(step: int, validate_every: int) -> bool:
    return step == 0 or (validate_every > 0 and step % validate_every == 0)


def _truncate_metrics(path: Path, step: int, validate_every: int, final_step: int) -> None:
    """Keep what an uninterrupted run would have written before resuming at ``step``.

    A checkpoint at ``final_step`` was saved after the closing validation, so that
    record stays even when it falls off the ``validate_every`` grid.
    """
    if not path.exists():
        raise FileNotFoundError(f"cannot resume: metrics log {path} is missing")
    keep = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        s = int(rec["step"])
        if rec["phase"] == "train" and s < step:
            keep.append(line)
        elif rec["phase"] == "val" and (
            s < step or (s == step and (_is_scheduled_validation(s, validate_every) or s == final_step))
        ):
            keep.append(line)
    path.write_text("".join(line + "\n" for line in keep), encoding="utf-8")


# ---------------------------------------------------------------------------
# Run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    checkpoint_path: Path
    metrics_path: Path
    final_step: int
    last: StepOutput | None
    checksums_before: dict[str, str]
    checksums_after: dict[str, str]


def _resume_compatible(saved: dict[str, Any], cfg: RunConfig) -> bool:
    a, b = json.loads(json.dumps(saved)), cfg.to_dict()
    for d in (a, b):
        for key in ("steps", "checkpoint_every", "log_every", "workers"):
            d["train"].pop(key, None)
    return a == json.loads(json.dumps(b))


def run_pretraining(
    cfg: RunConfig,
    manifest_path: str | Path,
    out_dir: str | Path,
    cluster_model: ClusterModel | None = None,
    resume_from: str | Path | None = None,
) -> RunResult:
    """Train for ``cfg.train.steps`` updates, writing metrics and checkpoints under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / METRICS_NAME
    tc = cfg.train

    ckpt = None
    if resume_from is not None:
        if tc.dtype != "float32":
            raise ConfigError(
                f"cannot resume a train.dtype={tc.dtype} run: checkpoints store float32 tensors, "
                "so the continuation would not match an uninterrupted run"
            )
        ckpt = load_checkpoint(resume_from)
        if not _resume_compatible(ckpt.config, cfg):
            raise ConfigError(f"checkpoint {resume_from} was written with a different configuration")
        if ckpt.step > tc.steps:
            raise ConfigError(f"checkpoint is at step {ckpt.step}, beyond the requested {tc.steps} steps")
        if cluster_model is None:
            cluster_model = ckpt.cluster_model

    data = prepare_data(cfg, manifest_path, cluster_model, None if ckpt is None else ckpt.norm_stats)
    state = init_state(cfg, data.bank, data.norm_stats, data.cluster_model)
    if ckpt is not None:
        restore_state(state, ckpt)
        _truncate_metrics(metrics_path, state.step, tc.validate_every, tc.steps)
        log.info("Resumed from %s at step %d", resume_from, state.step)
    else:
        metrics_path.write_text("", encoding="utf-8")

    before = frozen_checksums(data.bank, data.norm_stats, data.cluster_model)
    batches = make_batches(data.train, tc.batch_utterances, cfg.loss.cluster_weighting)
    extra = {"train_ids": [u.id for u in data.train], "val_ids": [u.id for u in data.val]}
    do_val = bool(data.val)
    if not do_val and tc.validate_every > 0:
        log.warning("No validation split (val_fraction=%s); skipping validation", tc.val_fraction)

    def write(rec: MetricsRecord) -> None:
        with metrics_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(rec.to_dict()) + "\n")

    def run_validation() -> None:
        res = validate(state, data.val)
        write(MetricsRecord("val", state.step, None, res.report, res.accuracy))
        log.info("step %d: validation total %.4f, accuracy %s", state.step, res.report.total,
                 ", ".join(f"{a:.3f}" for a in res.accuracy))

    if do_val and state.step == 0:
        run_validation()

    last: StepOutput | None = None
    checkpoint_path = out / FINAL_CHECKPOINT_NAME
    while state.step < tc.steps:
        s = state.step
        utts = [data.train[i] for i in batch_for_step(batches, s, tc.seed)]
        t0 = time.perf_counter()
        state, last = pretrain_step(state, utts)
        wall = (time.perf_counter() - t0) * 1000.0 if tc.record_wall_time else None
        write(MetricsRecord("train", s, last.learning_rate, last.report, last.accuracy, last.grad_norm, wall))
        if (s + 1) % tc.log_every == 0 or state.step == tc.steps:
            log.info("step %d/%d: loss %.4f, lr %.3g", state.step, tc.steps, last.report.total, last.learning_rate)

        if do_val and (_is_scheduled_validation(state.step, tc.validate_every) or state.step == tc.steps):
            run_validation()
        if tc.checkpoint_every > 0 and state.step % tc.checkpoint_every == 0 and state.step < tc.steps:
            save_checkpoint(to_checkpoint(state, extra), out / f"step-{state.step:06d}.brq")

    save_checkpoint(to_checkpoint(state, extra), checkpoint_path)
    after = frozen_checksums(data.bank, data.norm_stats, data.cluster_model)
    if after != before:
        raise RuntimeError("a frozen asset changed during training")
    return RunResult(checkpoint_path, metrics_path, state.step, last, before, after)
