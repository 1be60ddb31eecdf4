"""Command line for corpus synthesis, training, evaluation and feature export.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, DiffSVError

log = logging.getLogger("diffsv")


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _words(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="diffsv", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write the synthetic toy corpus, noise and trial list", formatter_class=fmt)
    s.add_argument("--speakers", type=int, default=8, help="number of toy speakers")
    s.add_argument("--utts", type=int, default=20, help="utterances per speaker")
    s.add_argument("--seed", type=int, default=0, help="corpus seed")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--test-utts", type=int, default=5, help="utterances per speaker held out for trials")
    s.add_argument("--noise-files", type=int, default=2, help="noise recordings per category and split")
    s.add_argument("--max-targets", type=int, default=2000, help="cap on target trials")

    t = sub.add_parser("train", help="run the unified training loop", formatter_class=fmt)
    t.add_argument("--config", default=None, help="YAML/JSON config layered over --preset")
    t.add_argument("--preset", default="desk", choices=["desk", "paper"], help="base configuration")
    t.add_argument("--data", required=True, help="speech manifest (JSON lines)")
    t.add_argument("--noise", required=True, help="noise manifest (JSON lines)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--ablation", default=None,
                   choices=["no-unified", "no-denoiser", "no-enh-loss", "no-hierarchical", "baseline"],
                   help="ablation preset")
    t.add_argument("--seed", type=int, default=None, help="override training.seed (DIFFSV_SEED also works)")
    t.add_argument("--epochs", type=int, default=None, help="override training.epochs")
    t.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    t.add_argument("--val-trials", default=None, help="validation trial list for best-checkpoint selection")
    t.add_argument("--val-data", default=None, help="manifest resolving the validation trial ids")

    e = sub.add_parser("evaluate", help="score trials under clean and noisy conditions", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--trials", required=True, help="trial list '<0|1> <enroll> <test>'")
    e.add_argument("--data", required=True, help="speech manifest resolving trial ids")
    e.add_argument("--noise", default=None, help="noise manifest with categories")
    e.add_argument("--snrs", type=_floats, default=[0.0, 5.0, 10.0, 15.0, 20.0], help="comma-separated SNRs (dB)")
    e.add_argument("--categories", type=_words, default=["babble", "music", "noise"],
                   help="comma-separated noise categories")
    e.add_argument("--clean-only", action="store_true", help="skip the noisy grid")
    e.add_argument("--steps", type=int, default=None, help="reverse ODE steps (default: diffusion.eval_steps)")
    e.add_argument("--seed", type=int, default=0, help="seed for noise selection and offsets")
    e.add_argument("--out", default=None, help="directory for metrics.jsonl (default: checkpoint directory)")
    e.add_argument("--dump-scores", action="store_true", help="also write per-condition score CSVs")

    n = sub.add_parser("enhance", help="enhance and denoise one WAV file into mel arrays", formatter_class=fmt)
    n.add_argument("--checkpoint", required=True, help="checkpoint file")
    n.add_argument("--wav", required=True, help="input WAV")
    n.add_argument("--out", required=True, help="output directory")
    n.add_argument("--steps", type=int, default=None, help="reverse ODE steps")

    x = sub.add_parser("export-spectrograms", help="dump clean/noisy/enhanced/denoised mel grids",
                       formatter_class=fmt)
    x.add_argument("--checkpoint", required=True, help="checkpoint file")
    x.add_argument("--wav", required=True, help="clean input WAV")
    x.add_argument("--noise-wav", default=None, help="noise WAV (default: seeded white noise)")
    x.add_argument("--snr", type=float, default=0.0, help="mixing SNR in dB")
    x.add_argument("--seed", type=int, default=0, help="noise offset seed")
    x.add_argument("--steps", type=int, default=None, help="reverse ODE steps")
    x.add_argument("--out", required=True, help="output directory")
    x.add_argument("--png", action="store_true", help="also render a PNG panel (needs matplotlib)")
    return p


# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    from .evaluation import make_trials, write_trials
    from .features import synth_toy_corpus, synth_toy_noise, write_manifest

    out = Path(args.out)
    manifest = synth_toy_corpus(args.speakers, args.utts, args.seed, out)
    held = max(0, min(args.test_utts, args.utts - 1))
    by_spk = {}
    for e in manifest:
        by_spk.setdefault(e.speaker, []).append(e)
    train = [e for es in by_spk.values() for e in es[: len(es) - held]]
    test = [e for es in by_spk.values() for e in es[len(es) - held:]] if held else list(manifest)
    write_manifest(out / "train.jsonl", train)
    write_manifest(out / "test.jsonl", test)
    synth_toy_noise(args.noise_files, args.seed + 1, out / "noise" / "train", prefix="train_")
    synth_toy_noise(args.noise_files, args.seed + 2, out / "noise" / "test", prefix="test_")
    trials = make_trials(test, args.seed, args.max_targets)
    write_trials(out / "trials.txt", trials)
    print(f"wrote {len(manifest)} utterances ({len(train)} train / {len(test)} test), "
          f"{len(trials)} trials to {out}")
    return 0


def cmd_train(args) -> int:
    from .config import apply_ablation, dump_config, load_config
    from .evaluation import read_trials, run_condition_grid
    from .features import read_manifest
    from .training import Trainer

    cfg = load_config(args.config, args.preset)
    cfg = apply_ablation(cfg, args.ablation)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        cfg = cfg.replace(training=overrides)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest, noise = read_manifest(args.data), read_manifest(args.noise)
    last = out / "last.ckpt"
    if args.resume and last.exists():
        trainer = Trainer.from_checkpoint(last, manifest, noise, run_dir=out)
        if args.epochs is not None:  # extend (or cap) the resumed run; everything else comes from the checkpoint
            trainer.cfg = trainer.cfg.replace(training={"epochs": args.epochs})
        cfg = trainer.cfg
    else:
        for stale in ("losses.csv", "best.ckpt", "last.ckpt"):
            (out / stale).unlink(missing_ok=True)
        trainer = Trainer(cfg, manifest, noise, run_dir=out)
    dump_config(cfg, out / "config.yaml")

    val = None
    if args.val_trials:
        val = (read_trials(args.val_trials), read_manifest(args.val_data or args.data))
    best = {"eer": float("inf")}

    def on_epoch(tr):
        if tr.epoch % cfg.training.checkpoint_every and tr.epoch != tr.total_epochs:
            return
        tr.save_checkpoint(last)
        if val is not None and tr.phase_of(tr.epoch - 1) != "frontend":
            rows, _ = run_condition_grid(tr.model, val[1], [], val[0])
            eer = rows[0]["eer"]
            log.info("epoch %d validation EER %.2f%%", tr.epoch, 100 * eer)
            if eer < best["eer"]:
                best["eer"] = eer
                tr.save_checkpoint(out / "best.ckpt")

    result = trainer.fit(on_epoch=on_epoch)
    trainer.save_checkpoint(last)
    if not result.ok:
        print(f"training halted: {result.reason}", file=sys.stderr)
        return 1
    print(f"trained {result.epochs_run} epochs; checkpoint {last}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import format_table, read_trials, run_condition_grid, write_metrics, write_scores
    from .features import read_manifest
    from .training import load_model

    model = load_model(args.checkpoint)
    trials = read_trials(args.trials)
    manifest = read_manifest(args.data)
    noise = read_manifest(args.noise) if args.noise else []
    grid = not args.clean_only and args.snrs and args.categories
    if grid and not noise:
        print("--noise is required for noisy conditions (or pass --clean-only)", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    ev = model.cfg.evaluation

    def sink(row, ss):
        if args.dump_scores:
            tag = "clean" if row["category"] is None else f"{row['category']}_{row['snr_db']:g}"
            write_scores(out / f"scores_{tag}.csv", ss)

    rows, average = run_condition_grid(
        model, manifest, noise, trials,
        snrs=args.snrs if grid else (), categories=args.categories if grid else (),
        p_target=ev.p_target, c_miss=ev.c_miss, c_fa=ev.c_fa, seed=args.seed, steps=args.steps,
        score_sink=sink,
    )
    write_metrics(out / "metrics.jsonl", rows)
    print(format_table(rows, average))
    return 0


def _mel_pipeline(model, wav, steps):
    import torch

    from .features import extract_mel

    x = extract_mel(wav, model.cfg.features).to_tensor(next(model.parameters()).dtype)
    if model.enhancer is None:
        raise DiffSVError("checkpoint has no enhancer (baseline model)", code="no-frontend")
    with torch.no_grad():
        x_hat = model.enhancer(x)
        z0 = model.denoise(x_hat, steps or model.cfg.diffusion.eval_steps) if model.denoiser is not None else x_hat
    return x[0, 0].numpy(), x_hat[0, 0].numpy(), z0[0, 0].numpy()


def cmd_enhance(args) -> int:
    from .features import read_wav
    from .training import load_model

    model = load_model(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, x_hat, z0 = _mel_pipeline(model, read_wav(args.wav, model.cfg.features.sample_rate), args.steps)
    np.save(out / "enhanced.npy", x_hat)
    np.save(out / "denoised.npy", z0)
    print(f"wrote enhanced.npy and denoised.npy {x_hat.shape} to {out}")
    return 0


EXPORT_NAMES = ("clean_mel", "noisy_mel", "enhanced_clean", "enhanced_noisy", "denoised_clean", "denoised_noisy")


def cmd_export_spectrograms(args) -> int:
    from .features import MixSpec, Waveform, mix_at_snr, read_wav
    from .training import load_model

    model = load_model(args.checkpoint)
    sr = model.cfg.features.sample_rate
    clean = read_wav(args.wav, sr)
    if args.noise_wav:
        noise = read_wav(args.noise_wav, sr)
        category = "noise"
    else:
        noise = Waveform(np.random.default_rng(args.seed).standard_normal(len(clean)), sr)
        category = "synthetic"
    noisy = mix_at_snr(clean, noise, MixSpec(snr_db=args.snr, noise_category=category, seed=args.seed))
    c_mel, c_hat, c_z0 = _mel_pipeline(model, clean, args.steps)
    n_mel, n_hat, n_z0 = _mel_pipeline(model, noisy, args.steps)
    arrays = dict(zip(EXPORT_NAMES, (c_mel, n_mel, c_hat, n_hat, c_z0, n_z0)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in arrays.items():
        np.save(out / f"{name}.npy", arr)
    if args.png:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(3, 2, figsize=(10, 9), sharex=True, sharey=True)
        vmin, vmax = c_mel.min(), c_mel.max()
        for ax, (name, arr) in zip(axes.T.ravel(), arrays.items()):
            ax.imshow(arr.T, origin="lower", aspect="auto", vmin=vmin, vmax=vmax)
            ax.set_title(name)
        fig.tight_layout()
        fig.savefig(out / "spectrograms.png", dpi=100)
        plt.close(fig)
    print(f"wrote {len(arrays)} arrays {c_mel.shape} to {out}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "enhance": cmd_enhance,
    "export-spectrograms": cmd_export_spectrograms,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print("configuration errors:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 1
    except (DiffSVError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
