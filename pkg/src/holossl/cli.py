"""Command-line entry point.

Subcommands run the experiment in stages that communicate through files::

    synth -> pretrain -> ssl -> embed -> eval -> report

Exit codes: 0 success, 1 usage/config error, 2 data or integrity error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time
from pathlib import Path

from ._io import atomic_write_text, file_digest
from .cache import IMPORTED, NO_DIGEST, EmbeddingCache, IntegrityError, read_cache, verify_cache, write_cache
from .config import ConfigError, ExperimentConfig, load_config
from .encoder import init_params, load_checkpoint, save_checkpoint
from .evaluation import EvalReport, format_table1, shift_comparison, sweep_k, table1_csv, write_report
from .imaging import generate_synthetic, read_manifest, save_image, write_manifest
from .pipeline import build_caches, load_records, pretrain_generic, refine, sets_from_caches

log = logging.getLogger("holossl")

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _log_writer(rows: list[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "mean_loss", "wall_seconds"))
    w.writerows(rows)
    return buf.getvalue()


def _checkpoint(cfg: ExperimentConfig, source: str) -> Path:
    return cfg.checkpoint_dir / f"{source}.ckpt"


def _cache_path(cfg: ExperimentConfig, source: str, instrument: str) -> Path:
    return cfg.cache_dir / f"{source}_{instrument}.bcache"


def _require_manifest(cfg: ExperimentConfig):
    if not cfg.manifest.exists():
        raise FileNotFoundError(f"manifest not found: {cfg.manifest} (run 'synth' first)")
    return read_manifest(cfg.manifest)


def cmd_synth(cfg: ExperimentConfig, args) -> None:
    data = generate_synthetic(cfg.synthetic_spec(), cfg.seed)
    manifest_dir = cfg.manifest.parent
    records = []
    for img, rec in data:
        target = cfg.data_dir / rec.image_path
        target.parent.mkdir(parents=True, exist_ok=True)
        save_image(img, target)
        rel = os.path.relpath(target, manifest_dir).replace(os.sep, "/")
        records.append(type(rec)(rel, rec.taxon, rec.instrument, rec.split))
    cfg.manifest.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(records, cfg.manifest)
    log.info("wrote %d images and %s", len(records), cfg.manifest)


def cmd_pretrain(cfg: ExperimentConfig, args) -> None:
    rows = []
    t0 = time.perf_counter()

    def on_epoch(epoch, loss):
        nonlocal t0
        now = time.perf_counter()
        rows.append((epoch, repr(loss), f"{now - t0:.3f}"))
        t0 = now
        log.info("pretrain epoch %d loss %.4f", epoch, loss)

    params = pretrain_generic(cfg, on_epoch)
    save_checkpoint(params, _checkpoint(cfg, "generic"))
    atomic_write_text(cfg.checkpoint_dir / "pretrain_log.csv", _log_writer(rows))


def cmd_ssl(cfg: ExperimentConfig, args) -> None:
    records = [r for r in _require_manifest(cfg) if r.split == "unlabelled"]
    generic = _checkpoint(cfg, "generic")
    if args.from_random:
        params = init_params(cfg.encoder_config(), cfg.seed)
    elif generic.exists():
        params = load_checkpoint(generic)
        if params.config != cfg.encoder_config():
            raise IntegrityError(f"{generic} was trained with a different encoder config")
    else:
        raise UsageError(f"no generic checkpoint at {generic}; run 'pretrain' first or pass --from-random")
    images = load_records(cfg.manifest, records)
    rows = []

    def on_epoch(epoch, loss, wall):
        rows.append((epoch, repr(loss), f"{wall:.3f}"))
        log.info("ssl epoch %d loss %.4f (%.1fs)", epoch, loss, wall)

    refined = refine(params, images, cfg, on_epoch)
    save_checkpoint(refined, _checkpoint(cfg, "ssl_refined"))
    atomic_write_text(cfg.checkpoint_dir / "ssl_log.csv", _log_writer(rows))


def _read_import(path: Path) -> dict[str, list[float]]:
    vectors: dict[str, list[float]] = {}
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for n, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                values = [float(v) for v in row[1:]]
            except ValueError:
                if n == 1:
                    continue  # header line
                raise ValueError(f"{path}:{n}: non-numeric vector entry") from None
            if width is None:
                width = len(values)
            if len(values) != width or width == 0:
                raise ValueError(f"{path}:{n}: dimension mismatch, expected {width} values, got {len(values)}")
            vectors[row[0]] = values
    if not vectors:
        raise ValueError(f"{path}: no vectors to import")
    return vectors


def cmd_embed(cfg: ExperimentConfig, args) -> None:
    records = _require_manifest(cfg)
    if args.import_file:
        vectors = _read_import(Path(args.import_file))
        by_id = {r.image_path: r for r in records}
        missing = [rid for rid in vectors if rid not in by_id]
        if missing:
            raise ValueError(f"imported ids not in manifest: {', '.join(missing[:5])}")
        grouped: dict[str, list] = {}
        for rid, vec in vectors.items():
            rec = by_id[rid]
            grouped.setdefault(rec.instrument, []).append((rid, rec, vec))
        for inst, rows in grouped.items():
            cache = EmbeddingCache(IMPORTED, NO_DIGEST, [r[0] for r in rows], [inst] * len(rows),
                                   [r[1].taxon for r in rows], [r[1].split for r in rows], [r[2] for r in rows])
            write_cache(cache, _cache_path(cfg, IMPORTED, inst))
            log.info("imported %d vectors for %s", len(rows), inst)
        return
    labelled = [r for r in records if r.split != "unlabelled"]
    images = None
    for source in cfg.feature_sources:
        if source == IMPORTED:
            continue
        ckpt = _checkpoint(cfg, source)
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint for feature source {source!r} not found: {ckpt}")
        params = load_checkpoint(ckpt)
        if images is None:
            images = load_records(cfg.manifest, labelled)
        items = ((img, rec, rec.image_path) for img, rec in zip(images, labelled))
        for inst, cache in build_caches(params, items, source, file_digest(ckpt)).items():
            write_cache(cache, _cache_path(cfg, source, inst))
            log.info("cached %d %s embeddings for %s", len(cache), source, inst)


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    instruments = list(dict.fromkeys((cfg.primary_instrument, *cfg.test_instruments)))
    caches = []
    for source in cfg.feature_sources:
        for inst in instruments:
            path = _cache_path(cfg, source, inst)
            if not path.exists():
                raise FileNotFoundError(
                    f"missing embedding cache for (feature_source={source!r}, instrument={inst!r}): {path}"
                )
            cache = read_cache(path)
            verify_cache(cache, None if source == IMPORTED else _checkpoint(cfg, source))
            caches.append(cache)
    report = sweep_k(sets_from_caches(caches), cfg.ks, cfg.repeats, cfg.heads, cfg.feature_sources,
                     cfg.primary_instrument, cfg.test_instruments, cfg.seed, cfg.head_settings())
    head = "linear" if "linear" in cfg.heads else cfg.heads[0]
    write_report(report, cfg.report_dir, head)
    print(format_table1(shift_comparison(report, head)))


def cmd_report(cfg: ExperimentConfig, args) -> None:
    path = cfg.report_dir / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"no report at {path} (run 'eval' first)")
    report = EvalReport.from_json(path.read_text(encoding="utf-8"))
    heads = list(dict.fromkeys(e.head for e in report.entries))
    head = "linear" if "linear" in heads else heads[0]
    write_report(report, cfg.report_dir, head)
    for h in heads:
        print(f"[{h}]")
        print(format_table1(shift_comparison(report, h)))
    print()
    print(f"{'features':<14}{'head':<11}{'k':>4}  {'test':<6}{'mean':>8}{'stdev':>8}")
    for e in report.entries:
        print(f"{e.feature_source:<14}{e.head:<11}{e.k:>4}  {e.test_instrument:<6}{e.mean:>8.3f}{e.stdev:>8.3f}")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "ssl": cmd_ssl,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--epochs", type=int, help="training epochs for pretrain/ssl")
    common.add_argument("--k", help="comma-separated shot counts for eval")
    common.add_argument("--repeats", type=int, help="episode draws per configuration")
    common.add_argument("--import", dest="import_file", help="CSV of externally computed vectors (embed)")
    common.add_argument("--from-random", action="store_true", help="ssl: start from a random encoder")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="holossl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if args.epochs is not None:
        if args.command == "pretrain":
            out["pretrain_epochs"] = str(args.epochs)
        elif args.command == "ssl":
            out["ssl_epochs"] = str(args.epochs)
    if args.k is not None:
        out["ks"] = args.k
    if args.repeats is not None:
        out["repeats"] = str(args.repeats)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, _overrides(args))
        COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"holossl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, IntegrityError, FloatingPointError) as exc:
        print(f"holossl {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
