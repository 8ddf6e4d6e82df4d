"""Command line entry point: ``gradleak {train,attack,proxy,run,report}``.

Exit codes: 0 success, 1 config error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..errors import (
    AttackFailedError,
    ConfigError,
    GradLeakError,
    InsufficientDataError,
    ParseError,
)
from ..gradmatch import GradLossKind
from ..lavp import PROXY_NAMES
from ..metrics import similarity_scores
from ..smallnet import save_weights
from .config import ExperimentConfig, dump_config, load_config, with_overrides
from .pipeline import image_shape, load_samples, run_experiment, sample_attack, sample_proxies, train_model
from .report import emit_report, fmt_real, rerender

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("gradleak")


def write_pgm(path, x, shape):
    """Binary 8-bit PGM (P5) of a [0, 1] image vector."""
    pix = np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{shape.width} {shape.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pix.reshape(shape.height, shape.width).tobytes())


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return with_overrides(cfg, seed=args.seed, out=args.out)


def _out_dir(cfg) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args, cfg):
    w = train_model(cfg)
    path = _out_dir(cfg) / "weights"
    save_weights(w, path, seed=cfg.master_seed)
    print(f"weights written to {path.with_suffix('.json')}")


def cmd_attack(args, cfg):
    train, evals = load_samples(cfg)
    if not 0 <= args.sample < len(evals):
        raise ConfigError(f"--sample {args.sample} outside 0..{len(evals) - 1}")
    w = train_model(cfg, train)
    sample = evals[args.sample]
    kinds = [GradLossKind.parse(args.kind)] if args.kind else list(cfg.kinds)
    out = _out_dir(cfg)
    shape = image_shape(cfg)
    write_pgm(out / f"sample{args.sample}_truth.pgm", sample.x, shape)
    for kind in kinds:
        res = sample_attack(cfg, w, sample, args.sample, kind)
        scores = similarity_scores(res.x_rec, sample.x, shape)
        record = {"sample_id": args.sample, "label": sample.y, "kind": kind.value,
                  "mse": scores.mse, "psnr": scores.psnr, "ssim": scores.ssim, **res.to_dict()}
        stem = f"sample{args.sample}_{kind.value}"
        (out / f"{stem}.json").write_text(json.dumps(record, indent=2) + "\n")
        write_pgm(out / f"{stem}.pgm", res.x_rec, shape)
        print(f"{kind.value}: gm loss {res.initial_gm_loss:.3g} -> {res.final_gm_loss:.3g}, "
              f"mse {scores.mse:.4g}")


def cmd_proxy(args, cfg):
    train, evals = load_samples(cfg)
    w = train_model(cfg, train)
    lines = [",".join(("sample_id", "label", *PROXY_NAMES))]
    for i, s in enumerate(evals):
        rec = sample_proxies(cfg, w, s, i)
        lines.append(",".join([str(i), str(s.y), *(fmt_real(getattr(rec, p)) for p in PROXY_NAMES)]))
    path = _out_dir(cfg) / "proxies.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")
    print(f"proxies for {len(evals)} samples written to {path}")


def cmd_run(args, cfg):
    result = run_experiment(cfg)
    out = emit_report(result.rows, result.report, cfg.output_dir, dump_config(cfg))
    failed = sum(1 for r in result.rows if r.failures)
    print(f"{len(result.rows)} samples ({failed} with failed attacks); report in {out}")
    _print_headline(result.report)


def cmd_report(args, cfg):
    src = Path(args.input) if args.input else Path(cfg.output_dir)
    _, report = rerender(src, cfg.output_dir if args.out else None)
    _print_headline(report)


def _print_headline(report):
    for column in report.columns:
        if not column.startswith("mse_"):
            continue
        cells = "  ".join(f"{p}={report.get(p, column):+.3f}" for p in report.proxies)
        print(f"spearman vs {column}: {cells}")


def build_parser():
    p = argparse.ArgumentParser(prog="gradleak", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="experiment config file (key = value)")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--out", help="override output_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", help="train the model and save its weights")
    pa = sub.add_parser("attack", help="attack one evaluation sample")
    pa.add_argument("--sample", type=int, default=0, help="evaluation sample index")
    pa.add_argument("--kind", choices=[k.value for k in GradLossKind])
    sub.add_parser("proxy", help="compute the six proxies for every sample")
    sub.add_parser("run", help="full pipeline with report")
    pr = sub.add_parser("report", help="re-render report files from samples.csv")
    pr.add_argument("--input", help="directory holding samples.csv (default: output_dir)")
    return p


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "proxy": cmd_proxy,
            "run": cmd_run, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, InsufficientDataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AttackFailedError, GradLeakError, ArithmeticError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
