from __future__ import annotations

import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional

import click
import typer
from rich.console import Console
from rich.table import Table

from . import audio, clustering, config, features, stats, trainer
from .checkpoint import load_checkpoint
from .logs import err_console, setup_logging
from .quantizer import QuantizerBank, init_bank, quantize

app = typer.Typer(add_completion=False, help="bestrq-desk: desk-scale BEST-RQ pre-training with multiple codebooks")
console = Console()
log = logging.getLogger(__name__)


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug-level diagnostics on stderr")):
    """Synthesize corpora, cluster utterances, pre-train and inspect runs."""
    setup_logging(verbose)


@contextmanager
def _errors() -> Iterator[None]:
    """Exit 1 for user errors, 2 for anything unexpected; messages go to stderr."""
    try:
        yield
    except (click.exceptions.Exit, click.exceptions.Abort, click.ClickException):
        raise
    except (ValueError, LookupError, FileNotFoundError) as e:
        err_console.print(f"error: {e}", markup=False, highlight=False)
        raise typer.Exit(1)
    except Exception as e:
        log.debug("internal error", exc_info=True)
        err_console.print(f"internal error: {type(e).__name__}: {e}", markup=False, highlight=False)
        raise typer.Exit(2)


def _require(ctx: typer.Context, **options: object) -> None:
    missing = [name for name, value in options.items() if value is None]
    if missing:
        err_console.print(ctx.get_usage(), markup=False, highlight=False)
        flags = ", ".join(f"--{m.replace('_', '-')}" for m in missing)
        err_console.print(f"error: missing required option(s): {flags}", markup=False, highlight=False)
        raise typer.Exit(1)


def _emit_json(data: object, out: Optional[Path]) -> None:
    text = json.dumps(data, indent=2)
    if out is None:
        typer.echo(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


@app.command()
def synth(
    ctx: typer.Context,
    n: Optional[int] = typer.Option(None, "--n", help="Number of utterances (required, >= 1)"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory for WAVs and manifest.jsonl (required)"),
    seed: int = typer.Option(0, "--seed", help="Corpus seed"),
    duration: float = typer.Option(2.0, "--duration", help="Utterance length in seconds"),
    families: str = typer.Option(
        ",".join(audio.SIGNAL_FAMILIES), "--families", help="Comma-separated signal families, cycled per utterance"
    ),
    tone_hz: Optional[float] = typer.Option(None, "--tone-hz", help="Fixed frequency for the tone family"),
    sample_rate: int = typer.Option(16000, "--sample-rate", help="Sample rate in Hz"),
):
    """Generate a deterministic synthetic corpus and its manifest."""
    _require(ctx, n=n, out=out)
    with _errors():
        recipe = audio.CorpusRecipe(
            n_utterances=n,
            seed=seed,
            duration_s=duration,
            families=tuple(f.strip() for f in families.split(",") if f.strip()),
            sample_rate_hz=sample_rate,
            tone_hz=tone_hz,
        )
        manifest = audio.write_corpus(audio.synth_corpus(recipe), out)
        console.print(f"Wrote {n} utterances and {manifest}")


@app.command("features")
def features_cmd(
    ctx: typer.Context,
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Input manifest (required)"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output feature dump file (required)"),
    kind: features.FeatureKind = typer.Option(features.FeatureKind.LOG_MEL, "--kind", help="Feature kind to dump"),
    normalize: bool = typer.Option(False, "--normalize", help="Standardize with statistics over the whole manifest"),
    workers: int = typer.Option(1, "--workers", help="Utterance-level worker threads"),
):
    """Dump one feature kind for every utterance (JSON header + float32 rows per block)."""
    _require(ctx, manifest=manifest, out=out)
    with _errors():
        corpus = audio.load_corpus(manifest)
        cfg = features.FrameConfig()
        seqs = features.extract_many(lambda ew: features.compute_feature(kind, ew[1], cfg), corpus, workers)
        if normalize:
            norm = features.compute_norm_stats(seqs)
            seqs = [features.normalize_global(s, norm) for s in seqs]
        features.write_feature_dump(((e.id, s) for (e, _), s in zip(corpus, seqs)), out)
        console.print(f"Wrote {len(seqs)} {kind.value} blocks to {out}")


@app.command()
def cluster(
    ctx: typer.Context,
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Input manifest (required)"),
    k: Optional[int] = typer.Option(None, "--k", help="Number of clusters; must equal the codebook count (required)"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory for clusters.json and manifest.jsonl"),
    seed: int = typer.Option(0, "--seed", help="k-means++ seed"),
    max_iters: int = typer.Option(100, "--max-iters", help="Lloyd iteration cap"),
    workers: int = typer.Option(1, "--workers", help="Utterance-level worker threads"),
):
    """Cluster utterances on descriptor summaries and annotate the manifest with cluster ids."""
    _require(ctx, manifest=manifest, k=k, out=out)
    with _errors():
        corpus = audio.load_corpus(manifest)
        cfg = features.FrameConfig()
        summaries = features.extract_many(lambda ew: features.utterance_summary(ew[1], cfg), corpus, workers)
        model = clustering.fit_kmeans(summaries, k, seed=seed, max_iters=max_iters)
        out.mkdir(parents=True, exist_ok=True)
        clustering.save_cluster_model(model, out / "clusters.json")
        entries = []
        for entry, _ in corpus:
            audio_path = audio.resolve_audio_path(entry, manifest).resolve()
            rel = Path(os.path.relpath(audio_path, out.resolve())).as_posix()
            entries.append(audio.ManifestEntry(entry.id, rel, entry.duration_s, model.assignments[entry.id]))
        audio.write_manifest(entries, out / "manifest.jsonl")
        sizes = [sum(1 for e in entries if e.cluster == c) for c in range(k)]
        console.print(f"k={k} cluster sizes: {sizes}")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@app.command()
def pretrain(
    ctx: typer.Context,
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Training manifest (required unless --dump-config)"),
    out: Optional[Path] = typer.Option(None, "--out", help="Run directory for metrics and checkpoints"),
    preset: Optional[str] = typer.Option(None, "--preset", help=f"Named configuration: {', '.join(config.PRESETS)}"),
    config_path: Optional[Path] = typer.Option(None, "--config", help="JSON (or YAML) config file"),
    overrides: Optional[List[str]] = typer.Option(None, "--set", help="Override as section.key=value (repeatable)"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Run seed (train.seed)"),
    steps: Optional[int] = typer.Option(None, "--steps", help="Optimizer steps (train.steps)"),
    codebooks: Optional[int] = typer.Option(None, "--codebooks", help="Codebook count N (quantizer.n_codebooks)"),
    batch_size: Optional[int] = typer.Option(None, "--batch-size", help="Utterances per batch"),
    cluster_model: Optional[Path] = typer.Option(None, "--cluster-model", help="clusters.json from `brq cluster`"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint to resume from"),
    dump_config: bool = typer.Option(False, "--dump-config", help="Print the resolved config as JSON and exit"),
):
    """Run masked-prediction pre-training."""
    with _errors():
        cfg = config.resolve_config(
            preset=preset,
            config_path=config_path,
            overrides=overrides or (),
            flags={
                "train": {"seed": seed, "steps": steps, "batch_utterances": batch_size},
                "quantizer": {"n_codebooks": codebooks},
            },
        )
        if dump_config:
            typer.echo(config.dump_config(cfg))
            return
    _require(ctx, manifest=manifest, out=out)
    with _errors():
        model = clustering.load_cluster_model(cluster_model) if cluster_model is not None else None
        if model is None and resume is not None and resume.exists():
            model = load_checkpoint(resume).cluster_model
        trainer.check_cluster_model(cfg, model)
        result = trainer.run_pretraining(cfg, manifest, out, cluster_model=model, resume_from=resume)
        summary = {
            "checkpoint": str(result.checkpoint_path),
            "metrics": str(result.metrics_path),
            "steps": result.final_step,
            "final_loss": None if result.last is None else result.last.report.total,
        }
        typer.echo(json.dumps(summary))


@app.command()
def validate(
    ctx: typer.Context,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="BRQ1 checkpoint (required)"),
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Validation manifest (required)"),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the JSON report here instead of stdout"),
):
    """Validation losses and masked-target accuracy of a checkpoint, with fixed masks."""
    _require(ctx, checkpoint=checkpoint, manifest=manifest)
    with _errors():
        ckpt = load_checkpoint(checkpoint)
        cfg = config.RunConfig.from_dict(ckpt.config)
        bank = QuantizerBank.from_dict(ckpt.quantizer)
        corpus = audio.load_corpus(manifest)
        clusters = None
        if cfg.loss.cluster_weighting:
            if ckpt.cluster_model is None:
                raise ValueError("checkpoint uses cluster weighting but carries no cluster model")
            clusters = trainer.resolve_clusters(corpus, ckpt.cluster_model, cfg)
        utts = trainer.build_utterances(corpus, cfg, bank, ckpt.norm_stats, clusters)
        state = trainer.restore_state(trainer.init_state(cfg, bank, ckpt.norm_stats, ckpt.cluster_model), ckpt)
        res = trainer.validate(state, utts)
        _emit_json({"step": ckpt.step, **res.report.to_dict(), "accuracy": res.accuracy}, out)


# ---------------------------------------------------------------------------
# Inspection
# ---------------------------------------------------------------------------


@app.command("quantize")
def quantize_cmd(
    ctx: typer.Context,
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Input manifest (required)"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output token file, JSON Lines (required)"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Take bank and normalization from a run"),
    codebooks: int = typer.Option(1, "--codebooks", help="Codebook count N"),
    codebook_size: int = typer.Option(8192, "--codebook-size", help="Codebook size V"),
    codebook_dim: int = typer.Option(16, "--codebook-dim", help="Codebook dimension d"),
    seed: int = typer.Option(0, "--seed", help="Quantizer seed"),
    workers: int = typer.Option(1, "--workers", help="Utterance-level worker threads"),
):
    """Emit per-utterance target index sequences (one JSON object per line)."""
    _require(ctx, manifest=manifest, out=out)
    with _errors():
        corpus = audio.load_corpus(manifest)
        if checkpoint is not None:
            ckpt = load_checkpoint(checkpoint)
            bank = QuantizerBank.from_dict(ckpt.quantizer)
            frame = config.RunConfig.from_dict(ckpt.config).frame
            mels = features.extract_many(lambda ew: features.log_mel(ew[1], frame), corpus, workers)
            norm = ckpt.norm_stats
        else:
            frame = features.FrameConfig()
            bank = init_bank(seed, codebooks, codebook_size, codebook_dim, 4, frame.n_mels)
            mels = features.extract_many(lambda ew: features.log_mel(ew[1], frame), corpus, workers)
            norm = features.compute_norm_stats(mels)
        records = []
        for (entry, _), mel in zip(corpus, mels):
            targets, _ = quantize(bank, features.normalize_global(mel, norm))
            records.append(stats.TokenRecord(entry.id, bank.codebook_size, targets.indices))
        stats.write_tokens(records, out)
        console.print(f"Wrote {len(records)} token records to {out}")


@app.command("stats")
def stats_cmd(
    ctx: typer.Context,
    tokens: Optional[Path] = typer.Option(None, "--tokens", help="Token file from `brq quantize`"),
    codebook_size: Optional[int] = typer.Option(None, "--codebook-size", help="Override V for utilization"),
    mask: bool = typer.Option(False, "--mask", help="Include the Monte-Carlo mask-coverage report"),
    mask_p: float = typer.Option(0.15, "--mask-p", help="Span start probability"),
    mask_span: int = typer.Option(4, "--mask-span", help="Span length in frames"),
    mask_frames: int = typer.Option(10_000, "--mask-frames", help="Frames per simulated utterance"),
    mask_seeds: int = typer.Option(200, "--mask-seeds", help="Number of simulated utterances"),
    seed: int = typer.Option(0, "--seed", help="Base seed for the mask simulation"),
    json_out: bool = typer.Option(False, "--json", help="Output as JSON"),
):
    """Codebook utilization/entropy of a token file and mask coverage against 1 - (1 - p)^span."""
    if tokens is None and not mask:
        _require(ctx, tokens=tokens)
    with _errors():
        report: dict = {}
        if tokens is not None:
            usage = stats.codebook_usage(stats.read_tokens(tokens), codebook_size)
            report["codebooks"] = [u.to_dict() for u in usage]
        if mask:
            report["mask"] = stats.mask_coverage(mask_p, mask_span, mask_frames, mask_seeds, seed).to_dict()

        if json_out:
            typer.echo(json.dumps(report, indent=2))
            return
        if "codebooks" in report:
            t = Table(title="Codebook utilization")
            for col in ("Codebook", "Tokens", "Used", "Utilization", "Entropy (nats)", "Perplexity"):
                t.add_column(col, justify="right")
            for u in report["codebooks"]:
                t.add_row(
                    str(u["codebook"]), str(u["tokens"]), str(u["used_codes"]),
                    f"{u['utilization']:.4f}", f"{u['entropy_nats']:.4f}", f"{u['perplexity']:.1f}",
                )
            console.print(t)
        if "mask" in report:
            m = report["mask"]
            console.print(
                f"Mask coverage p={m['p_start']} span={m['span']}: empirical {m['empirical']:.4f} "
                f"(std {m['std_across_seeds']:.4f} over {m['n_seeds']} seeds), expected {m['expected']:.4f}"
            )


@app.command()
def compare(
    ctx: typer.Context,
    baseline: Optional[Path] = typer.Option(None, "--baseline", help="Metrics log of the reference run (required)"),
    proposed: Optional[Path] = typer.Option(None, "--proposed", help="Metrics log of the compared run (required)"),
    json_out: bool = typer.Option(False, "--json", help="Output as JSON"),
):
    """Validation curves normalized by their first value, and which run ends lower."""
    _require(ctx, baseline=baseline, proposed=proposed)
    with _errors():
        cmp = stats.compare_runs(
            trainer.read_metrics(baseline), trainer.read_metrics(proposed), "baseline", "proposed"
        )
        if json_out:
            typer.echo(json.dumps(cmp.to_dict(), indent=2))
            return
        t = Table(title=f"Normalized validation loss (final common step {cmp.final_step})")
        t.add_column("Run")
        t.add_column("Step 0 total", justify="right")
        t.add_column("Final normalized", justify="right")
        for c in (cmp.a, cmp.b):
            t.add_row(c.label, f"{c.totals[0]:.4f}", f"{c.value_at(cmp.final_step):.4f}")
        console.print(t)
        console.print(f"Lower at the final step: [bold]{cmp.lower}[/bold]")


# ---------------------------------------------------------------------------
# Help
# ---------------------------------------------------------------------------

_HELP_REFERENCE: list[dict] = [
    {
        "category": "Corpus",
        "commands": [
            {
                "name": "synth",
                "desc": "Generate a deterministic synthetic corpus (tone, harmonic, noise, pattern).",
                "options": ["--n INT (required)", "--out DIR (required)", "--seed INT", "--families LIST"],
                "example": "brq synth --n 8 --seed 7 --out data/toy",
            },
            {
                "name": "features",
                "desc": "Dump one feature kind per utterance as header + float32 blocks.",
                "options": ["--manifest PATH (required)", "--out PATH (required)", "--kind KIND", "--normalize"],
                "example": "brq features --manifest data/toy/manifest.jsonl --kind mfcc --out mfcc.bin",
            },
            {
                "name": "cluster",
                "desc": "k-means on utterance descriptor summaries; annotates the manifest with cluster ids.",
                "options": ["--manifest PATH (required)", "--k INT (required)", "--out DIR (required)", "--seed INT"],
                "example": "brq cluster --manifest data/toy/manifest.jsonl --k 6 --out data/clustered",
            },
        ],
    },
    {
        "category": "Training",
        "commands": [
            {
                "name": "pretrain",
                "desc": "Masked-prediction pre-training; presets encode the named configurations.",
                "options": [
                    "--manifest PATH", "--out DIR", "--preset NAME", "--config PATH", "--set section.key=value",
                    "--seed INT", "--steps INT", "--codebooks INT", "--cluster-model PATH", "--resume PATH",
                    "--dump-config",
                ],
                "example": "brq pretrain --preset proposed --cluster-model data/clustered/clusters.json "
                           "--manifest data/clustered/manifest.jsonl --seed 7 --out runs/proposed",
            },
            {
                "name": "validate",
                "desc": "Validation loss and masked accuracy of a checkpoint with fixed masks.",
                "options": ["--checkpoint PATH (required)", "--manifest PATH (required)", "--out PATH"],
                "example": "brq validate --checkpoint runs/proposed/final.brq --manifest data/toy/manifest.jsonl",
            },
        ],
    },
    {
        "category": "Inspection",
        "commands": [
            {
                "name": "quantize",
                "desc": "Export target index sequences per utterance (JSON Lines).",
                "options": ["--manifest PATH (required)", "--out PATH (required)", "--checkpoint PATH",
                            "--codebooks INT", "--codebook-size INT", "--codebook-dim INT", "--seed INT"],
                "example": "brq quantize --manifest data/toy/manifest.jsonl --codebook-size 256 --out tokens.jsonl",
            },
            {
                "name": "stats",
                "desc": "Codebook utilization, entropy and perplexity; Monte-Carlo mask coverage.",
                "options": ["--tokens PATH", "--mask", "--mask-p FLOAT", "--mask-span INT", "--json"],
                "example": "brq stats --tokens tokens.jsonl --mask --json",
            },
            {
                "name": "compare",
                "desc": "Compare two runs' validation curves normalized by their first value.",
                "options": ["--baseline PATH (required)", "--proposed PATH (required)", "--json"],
                "example": "brq compare --baseline runs/baseline/metrics.jsonl --proposed runs/proposed/metrics.jsonl",
            },
        ],
    },
]


def _help_groups(category: str | None) -> list[dict]:
    if not category:
        return _HELP_REFERENCE
    groups = [g for g in _HELP_REFERENCE if category.lower() in g["category"].lower()]
    if not groups:
        names = ", ".join(g["category"] for g in _HELP_REFERENCE)
        err_console.print(f"No category matching {category!r} (have: {names})", markup=False)
        raise typer.Exit(1)
    return groups


@app.command("help")
def help_cmd(
    json_out: bool = typer.Option(False, "--json", help="Print the reference as JSON"),
    category: Optional[str] = typer.Option(None, "--category", "-c", help="Only groups whose name contains this"),
):
    """Commands grouped by workflow stage: corpus, training, inspection."""
    groups = _help_groups(category)
    if json_out:
        typer.echo(json.dumps(groups, indent=2))
        return
    for group in groups:
        t = Table(title=group["category"], title_justify="left", title_style="bold yellow", box=None)
        t.add_column("command", style="green", no_wrap=True)
        t.add_column("does")
        t.add_column("options", style="dim")
        for cmd in group["commands"]:
            t.add_row(cmd["name"], f"{cmd['desc']}\n[dim]$ {cmd['example']}[/dim]", "\n".join(cmd["options"]))
        console.print(t)
        console.print()


if __name__ == "__main__":
    app()
