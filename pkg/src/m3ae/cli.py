"""``m3ae`` command-line entry point.

Every command except ``gen-data`` writes into a run directory holding the
resolved configuration, a JSON summary with a git-style content hash of its
inputs, and the command's artifacts. Exit codes: 0 ok, 1 usage or
configuration error, 2 data error, 3 numeric failure.
"""
import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from m3ae import __version__
from m3ae.config import load_config
from m3ae.data import Dataset
from m3ae.errors import ConfigError, DataError, NumericError
from m3ae.model import M3AE, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# -- run bookkeeping -----------------------------------------------------------------------
def git_blob_hash(data):
    """SHA-1 of ``data`` as git would hash it into a blob object."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(named_blobs):
    """Tree-style hash over ``{name: blob_hash}``, independent of insertion order."""
    lines = "".join(f"{h} {n}\n" for n, h in sorted(named_blobs.items()))
    return git_blob_hash(lines.encode())


def _file_hashes(paths):
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = git_blob_hash(p.read_bytes())
    return out


class Run:
    def __init__(self, command, cfg, out=None, inputs=()):
        self.command, self.cfg = command, cfg
        config_json = cfg.to_json().encode()
        blobs = {"config.json": git_blob_hash(config_json), **_file_hashes(inputs)}
        self.input_hash = content_hash(blobs)
        self.blobs = blobs
        if out is None:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            out = Path(cfg.run.out) / f"{command}-{stamp}-{self.input_hash[:8]}"
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_bytes(config_json)

    def finish(self, results, outputs=()):
        summary = {"command": self.command, "version": __version__, "seed": self.cfg.run.seed,
                   "input_hash": self.input_hash, "inputs": self.blobs,
                   "outputs": _file_hashes(outputs), "results": results}
        (self.dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return summary


def _dataset(path, what="manifest"):
    if not path:
        raise ConfigError(f"no {what} given; set data.{what} in the config or via --override")
    return Dataset.load(path)


def _manifest_files(path):
    if not path:
        return []
    from m3ae.data import DatasetManifest, header_path

    m = DatasetManifest.load(path)
    files = [path, header_path(path)]
    return files + ([m.vocab_file] if m.vocab_file else [])


def _model(args, cfg, dataset):
    """Checkpoint from ``--checkpoint``, else a freshly initialized model (seed ``run.seed``)."""
    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise DataError(f"checkpoint not found: {args.checkpoint}")
        return load_checkpoint(args.checkpoint)[0]
    vocab = len(dataset.vocab) if dataset.vocab is not None else 2
    return M3AE(cfg.model.build(vocab), seed=cfg.run.seed)


# -- commands ----------------------------------------------------------------------------------
def cmd_gen_data(args, cfg):
    from m3ae.synthetic import generate

    spec = replace(cfg.synthetic, seed=cfg.run.seed if args.seed is not None else cfg.synthetic.seed)
    out = Path(args.out or "data/synthetic")
    manifest = generate(spec, out)
    summary = {"command": "gen-data", "manifest": str(manifest), "spec": asdict(spec),
               "outputs": _file_hashes(_manifest_files(manifest))}
    (out / "gen-data.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {spec.n} examples to {manifest}")
    return summary


def cmd_pretrain(args, cfg):
    from m3ae.train import pretrain

    ds = _dataset(cfg.data.manifest)
    inputs = _manifest_files(cfg.data.manifest) + ([args.resume] if args.resume else [])
    run = Run("pretrain", cfg, args.out, inputs)
    if args.resume:
        if not Path(args.resume).is_file():
            raise DataError(f"checkpoint not found: {args.resume}")
        model = M3AE(load_checkpoint(args.resume)[0].config, seed=cfg.run.seed)
    else:
        model = M3AE(cfg.model.build(len(ds.vocab)), seed=cfg.run.seed)
    result = pretrain(model, ds, cfg.pretrain_config(), out_dir=run.dir, resume=args.resume,
                      stop_at=cfg.pretrain.stop_at, log_path=run.dir / "metrics.csv")
    m = result.metrics
    last = m.rows[-1] if m.rows else {}
    results = {"steps": result.step, "checkpoint": str(result.checkpoint),
               "final_total": last.get("total"), "final_image_mse": last.get("image_mse"),
               "final_text_ce": last.get("text_ce")}
    print(f"pretrained {result.step} steps; final loss {last.get('total')}; run dir {run.dir}")
    return run.finish(results, [run.dir / "metrics.csv", result.checkpoint])


def cmd_probe(args, cfg):
    from m3ae.train import train_linear_probe

    path = cfg.data.eval_manifest or cfg.data.manifest
    ds = _dataset(path, "eval_manifest")
    run = Run("probe", cfg, args.out, _manifest_files(path) + ([args.checkpoint] if args.checkpoint else []))
    model = _model(args, cfg, ds)
    res = train_linear_probe(model, ds, replace(cfg.probe, seed=cfg.run.seed))
    results = {"accuracy": res.accuracy, "train_accuracy": res.train_accuracy,
               "chance": 1.0 / cfg.probe.n_classes, "checkpoint": args.checkpoint}
    np.savez(run.dir / "probe_head.npz", weight=res.weight, bias=res.bias,
             feature_mean=res.feature_mean, feature_std=res.feature_std)
    print(f"linear probe accuracy {res.accuracy:.4f} (chance {1.0 / cfg.probe.n_classes:.4f})")
    return run.finish(results)


def cmd_finetune(args, cfg):
    from m3ae.train import partial_finetune

    path = cfg.data.eval_manifest or cfg.data.manifest
    ds = _dataset(path, "eval_manifest")
    run = Run("finetune", cfg, args.out, _manifest_files(path) + ([args.checkpoint] if args.checkpoint else []))
    model = _model(args, cfg, ds)
    res = partial_finetune(model, ds, replace(cfg.finetune, seed=cfg.run.seed))
    ckpt = run.dir / "finetuned.m3ae"
    save_checkpoint(ckpt, res.model, {f"head/{k}": v.data for k, v in res.head.items()},
                    meta={"finetune": asdict(cfg.finetune)})
    print(f"fine-tune accuracy {res.accuracy:.4f} (k={cfg.finetune.blocks})")
    return run.finish({"accuracy": res.accuracy, "blocks": cfg.finetune.blocks,
                       "final_loss": res.history[-1] if res.history else None}, [ckpt])


def cmd_ood(args, cfg):
    from m3ae.ood import ood_benchmark

    in_path = cfg.data.eval_manifest or cfg.data.manifest
    in_ds = _dataset(in_path, "eval_manifest")
    out_ds = _dataset(cfg.data.ood_manifest, "ood_manifest")
    run = Run("ood", cfg, args.out, _manifest_files(in_path) + _manifest_files(cfg.data.ood_manifest)
              + ([args.checkpoint] if args.checkpoint else []))
    model = _model(args, cfg, in_ds)
    report = ood_benchmark(model, in_ds, out_ds, replace(cfg.ood, seed=cfg.run.seed), args.checkpoint)
    (run.dir / "ood_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(" ".join(f"{k}={v:.4f}" for k, v in report["aurocs"].items()))
    return run.finish(report, [run.dir / "ood_report.json"])


def cmd_export_recon(args, cfg):
    from m3ae.viz import export_reconstructions

    ds = _dataset(cfg.data.manifest)
    run = Run("export-recon", cfg, args.out, _manifest_files(cfg.data.manifest) + [args.checkpoint or ""])
    model = _model(args, cfg, ds)
    e = cfg.export
    recs = export_reconstructions(model, ds, e.n, cfg.run.seed, run.dir / "recon", e.r_img, e.r_txt, e.fill)
    mse = [r.masked_mse for r in recs]
    print(f"exported {len(recs)} reconstructions; mean masked MSE {np.mean(mse):.4f}")
    return run.finish({"n": len(recs), "masked_mse": mse, "mean_masked_mse": float(np.mean(mse))},
                      sorted((run.dir / "recon").iterdir()))


def cmd_export_attn(args, cfg):
    from m3ae.viz import export_attention

    ds = _dataset(cfg.data.manifest)
    run = Run("export-attn", cfg, args.out, _manifest_files(cfg.data.manifest) + [args.checkpoint or ""])
    model = _model(args, cfg, ds)
    e = cfg.export
    files = export_attention(model, ds, e.index, run.dir / "attention", e.tokens, e.patches, e.layer)
    print(f"wrote {len(files)} attention files to {run.dir / 'attention'}")
    return run.finish({"files": [str(f) for f in files]}, files)


def cmd_export_embed(args, cfg):
    from m3ae.viz import export_embeddings

    path = cfg.data.eval_manifest or cfg.data.manifest
    ds = _dataset(path, "eval_manifest")
    run = Run("export-embed", cfg, args.out, _manifest_files(path) + [args.checkpoint or ""])
    model = _model(args, cfg, ds)
    out = export_embeddings(model, ds, run.dir / "embeddings.csv", cfg.export.label_key)
    print(f"wrote {len(ds)} embeddings to {out}")
    return run.finish({"rows": len(ds)}, [out])


def cmd_grad_check(args, cfg):
    from m3ae.gradcheck import check_model, check_ops
    from m3ae.model import ModelConfig

    g = cfg.grad_check
    run = Run("grad-check", cfg, args.out)
    t0 = time.perf_counter()
    results, ok = {}, True
    for name, rep in check_ops(g.tol_ops, g.n_samples, cfg.run.seed):
        print(f"{'ok  ' if rep.passed else 'FAIL'} {name:<20} max rel err {rep.max_rel_err:.3e}")
        results[name] = rep.max_rel_err
        ok &= rep.passed
    mc = ModelConfig.from_preset(cfg.model.preset, vocab_size=32) if cfg.model.preset == "tiny" \
        else cfg.model.build(32)
    rep = check_model(mc, g.tol_model, cfg.run.seed)
    print(f"{'ok  ' if rep.passed else 'FAIL'} {'model loss':<20} max rel err {rep.max_rel_err:.3e} "
          f"({rep.n_checked} coordinates)")
    results["model"] = rep.max_rel_err
    ok &= rep.passed
    worst = max(results.values())
    print(f"max rel err {worst:.3e}; {time.perf_counter() - t0:.1f} s")
    run.finish({"max_rel_err": results, "passed": bool(ok)})
    if not ok:
        raise NumericError("gradient check failed")
    return results


def cmd_sweep_text_ratio(args, cfg):
    from m3ae.train import pretrain, train_linear_probe

    ds = _dataset(cfg.data.manifest)
    eval_path = cfg.data.eval_manifest or cfg.data.manifest
    eval_ds = ds if eval_path == cfg.data.manifest else _dataset(eval_path, "eval_manifest")
    run = Run("sweep-text-ratio", cfg, args.out, _manifest_files(cfg.data.manifest))
    rows = []
    for ratio in cfg.sweep.ratios:
        model = M3AE(cfg.model.build(len(ds.vocab)), seed=cfg.run.seed)
        pcfg = replace(cfg.pretrain_config(), r_txt=float(ratio))
        pretrain(model, ds, pcfg)
        acc = train_linear_probe(model, eval_ds, replace(cfg.probe, seed=cfg.run.seed)).accuracy
        rows.append({"r_txt": float(ratio), "probe_accuracy": acc})
        print(f"r_txt={ratio:<5} probe accuracy {acc:.4f}", flush=True)
    table = "r_txt,probe_accuracy\n" + "".join(f"{r['r_txt']!r},{r['probe_accuracy']!r}\n" for r in rows)
    (run.dir / "sweep.csv").write_text(table)
    return run.finish({"rows": rows}, [run.dir / "sweep.csv"])


COMMANDS = {
    "gen-data": (cmd_gen_data, "write the synthetic captioned-shapes dataset"),
    "pretrain": (cmd_pretrain, "masked multimodal pretraining"),
    "probe": (cmd_probe, "linear probe on frozen CLS features"),
    "finetune": (cmd_finetune, "partial fine-tuning of the last k blocks"),
    "ood": (cmd_ood, "out-of-distribution AUROC benchmark"),
    "export-recon": (cmd_export_recon, "masked reconstruction triptychs"),
    "export-attn": (cmd_export_attn, "cross-modal attention heatmaps"),
    "export-embed": (cmd_export_embed, "CLS embedding dump (CSV)"),
    "grad-check": (cmd_grad_check, "finite-difference gradient oracle"),
    "sweep-text-ratio": (cmd_sweep_text_ratio, "pretrain + probe over text mask ratios"),
}


def build_parser():
    parser = _Parser(prog="m3ae", description="Multimodal masked autoencoder at desk scale.")
    parser.add_argument("--version", action="version", version=f"m3ae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--seed", type=int, help="sets run.seed")
        p.add_argument("--out", help="output directory (default: timestamped under run.out)")
        if name in ("probe", "finetune", "ood", "export-recon", "export-attn", "export-embed"):
            p.add_argument("--checkpoint", help="model checkpoint (default: fresh random init)")
        if name == "pretrain":
            p.add_argument("--resume", help="continue from a checkpoint written by pretrain")
    return parser


def _thread_limit():
    value = os.environ.get("M3AE_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"M3AE_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"M3AE_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        overrides = list(args.override)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        cfg = load_config(args.config, overrides)
        limiter = _thread_limit()
        try:
            COMMANDS[args.command][0](args, cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
