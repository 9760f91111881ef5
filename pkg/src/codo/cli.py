"""``codo`` command-line entry point.

Exit codes: 0 success, 2 validation error, 3 runtime error, 4 data-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import yaml

from . import evalsuite, plots
from .config import ConfigError, RunConfig, parse_and_validate
from .corpus import generate_corpus, load_corpus
from .cpj import BackgroundPool, SkipSampleError, ViewSet, build_viewset
from .data import CorpusViewStream, ShardFormatError, ShardViewSource, write_shard
from .geometry import BoundingBox
from .proposals import NoProposalError, Proposal, filter_aspect_ratio, generate_proposals, select_one
from .trainer import ConfigMismatchError, deterministic_from_env, run_pretraining

log = logging.getLogger("codo")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_DATA = 0, 2, 3, 4
SHARD_SIZE = 1024


class DataFormatError(ValueError):
    pass


def _load_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    return parse_and_validate(args.config, overrides)


def _write_json(path: Path, payload: dict | list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
    tmp.replace(path)


def _read_jsonl(path: str | Path) -> list[dict]:
    try:
        with open(path) as f:
            return [json.loads(line) for line in f if line.strip()]
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: {e}") from e


# ----------------------------------------------------------------- images

def _load_images(path: Path) -> tuple[list[str], list[np.ndarray]]:
    """Images from a corpus directory, an ``.npy`` stack or a folder of files."""
    if path.is_dir() and (path / "pretrain_images.npy").exists():
        arr = np.load(path / "pretrain_images.npy")
        return [str(i) for i in range(len(arr))], list(arr)
    if path.suffix == ".npy":
        arr = np.load(path)
        return [str(i) for i in range(len(arr))], list(arr)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        images = []
        for f in files:
            img = cv2.imread(str(f), cv2.IMREAD_COLOR)
            if img is None:
                raise DataFormatError(f"cannot decode {f}")
            images.append(img[..., ::-1].copy())
        return [f.name for f in files], images
    raise DataFormatError(f"{path}: not a corpus, .npy stack or image folder")


def _pools_from_arg(spec: str, corpus_dir: Path | None) -> list[BackgroundPool]:
    pools = []
    corpus = load_corpus(corpus_dir) if corpus_dir is not None else None
    for item in spec.split(","):
        item = item.strip()
        if corpus is not None and item in {p.pool_id for p in corpus.pools}:
            pools.append(corpus.pool(item))
        else:
            _, images = _load_images(Path(item))
            pools.append(BackgroundPool(Path(item).stem, images))
    return pools


# ---------------------------------------------------------------- commands

def cmd_make_corpus(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    corpus_cfg = replace(cfg.corpus, seed=args.seed) if args.seed is not None else cfg.corpus
    out = generate_corpus(corpus_cfg, args.out)
    print(json.dumps({"corpus": str(out), **json.loads((out / "manifest.json").read_text())["counts"]}))
    return EXIT_OK


def cmd_generate_proposals(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    prop_cfg = replace(cfg.proposals, strategy=args.strategy) if args.strategy else cfg.proposals
    ids, images = _load_images(Path(args.input_dir))
    rng = np.random.default_rng(cfg.run.seed)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        for image_id, image in zip(ids, images):
            found = filter_aspect_ratio(generate_proposals(image, prop_cfg, rng, image_id=image_id))
            rec = {"image_id": image_id, "source": str(Path(args.input_dir).resolve())}
            try:
                p = select_one(found, rng)
                rec.update(box=list(p.box.as_tuple()), score=p.score)
            except NoProposalError:
                rec.update(box=None, score=None, skipped=True)
            f.write(json.dumps(rec) + "\n")
    return EXIT_OK


def cmd_make_views(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    records = [r for r in _read_jsonl(args.proposals) if r.get("box")]
    if not records:
        raise DataFormatError(f"{args.proposals}: no usable proposals")
    source_dir = Path(records[0]["source"])
    ids, images = _load_images(source_dir)
    by_id = dict(zip(ids, images))
    corpus_dir = Path(args.corpus) if args.corpus else (source_dir if (source_dir / "manifest.json").exists() else None)
    pools = _pools_from_arg(args.pools, corpus_dir)
    size = images[0].shape[0]
    rng = np.random.default_rng(cfg.run.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    viewsets: list[ViewSet] = []
    skipped = 0
    while len(viewsets) < args.count:
        rec = records[int(rng.integers(len(records)))]
        proposal = Proposal(BoundingBox(*rec["box"]), rec["image_id"], rec["score"])
        try:
            viewsets.append(build_viewset(
                proposal, by_id[rec["image_id"]], pools, args.n_keys,
                cfg.paste, cfg.jitter, cfg.photo, rng, foreground_id=f"img{rec['image_id']}",
            ))
        except SkipSampleError as e:
            skipped += 1
            log.warning("skipping %s: %s", rec["image_id"], e)
            if skipped > 10 * args.count:
                raise RuntimeError("too many skipped samples") from e
    shard = 0
    for shard, start in enumerate(range(0, len(viewsets), SHARD_SIZE)):
        write_shard(out / f"shard_{shard:05d}.views", viewsets[start : start + SHARD_SIZE], size)
    shard += 1
    print(json.dumps({"shards": shard, "out": str(out)}))
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    train_cfg = replace(cfg.train, deterministic=deterministic_from_env(args.deterministic or cfg.train.deterministic))
    if args.shards:
        source = ShardViewSource(Path(args.shards), seed=train_cfg.seed)
        if source.n_keys != train_cfg.n_keys:
            raise ConfigError([f"train.n_keys = {train_cfg.n_keys} but shards hold {source.n_keys} key views"])
    elif args.corpus:
        corpus = load_corpus(args.corpus)
        source = CorpusViewStream(
            corpus, n_keys=train_cfg.n_keys, query_pools=cfg.data.query_pools, key_pools=cfg.data.key_pools,
            proposal_cfg=cfg.proposals, paste_cfg=cfg.paste, jitter_cfg=cfg.jitter, photo_cfg=cfg.photo,
            seed=train_cfg.seed,
        )
    else:
        raise ConfigError(["pretrain needs --shards or --corpus"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", {"config_hash": cfg.hash, "train_hash": train_cfg.hash(), "config": cfg.to_dict()})
    final = run_pretraining(train_cfg, source, out, resume=args.resume)
    print(json.dumps({"checkpoint": str(final), "config_hash": cfg.hash}))
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    result = evalsuite.linear_probe(args.ckpt, load_corpus(args.corpus))
    print(json.dumps(result.to_dict()))
    return EXIT_OK


def cmd_eval_invariance(args: argparse.Namespace) -> int:
    report = evalsuite.invariance_probe(args.ckpt, load_corpus(args.corpus))
    payload = {"checkpoint": str(args.ckpt), **report.to_dict()}
    if args.out:
        _write_json(Path(args.out), payload)
    print(json.dumps(payload))
    print(
        f"same fg / diff bg {report.same_fg_diff_bg_cosine.mean:.3f} ± {report.same_fg_diff_bg_cosine.std:.3f}   "
        f"diff fg {report.diff_fg_cosine.mean:.3f} ± {report.diff_fg_cosine.std:.3f}   gap {report.gap:.3f}",
        file=sys.stderr,
    )
    return EXIT_OK


def _load_matrix(path: str | None) -> list[evalsuite.AblationRow]:
    if path is None:
        return list(evalsuite.DEFAULT_MATRIX)
    doc = yaml.safe_load(Path(path).read_text())
    rows = doc.get("rows") if isinstance(doc, dict) else doc
    if not isinstance(rows, list) or not rows:
        raise ConfigError([f"{path}: expected a list of rows"])
    violations, out = [], []
    for i, r in enumerate(rows):
        if not isinstance(r, dict) or not {"name", "query_pools"} <= set(r):
            violations.append(f"row {i}: needs name and query_pools")
            continue
        unknown = set(r) - {"name", "query_pools", "key_pools"}
        if unknown:
            violations.append(f"row {i}: unknown keys {sorted(unknown)}")
            continue
        out.append(evalsuite.AblationRow(r["name"], tuple(r["query_pools"]), tuple(r.get("key_pools") or r["query_pools"])))
    if violations:
        raise ConfigError(violations)
    return out


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    matrix = _load_matrix(args.matrix)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    cells = evalsuite.ablation_backgrounds(
        load_corpus(args.corpus), matrix, budget=args.budget, seeds=seeds, base=cfg.train, out_dir=out,
    )
    _write_json(out / "ablation.json", {"config_hash": cfg.hash, "cells": cells})
    table = evalsuite.format_table(cells)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    metrics = _read_jsonl(args.metrics) if args.metrics else []
    reports: list[dict] = []
    if args.report:
        doc = json.loads(Path(args.report).read_text())
        reports = doc["cells"] if isinstance(doc, dict) and "cells" in doc else doc
    written = plots.emit_plots(metrics, reports, args.out)
    print(json.dumps({"written": [str(p) for p in written]}))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codo", description="Copy-paste-jitter contrastive pretraining at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help: str, config: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        if config:
            p.add_argument("--config", help="YAML run configuration")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
            p.add_argument("--seed", type=int)
        p.set_defaults(func=func)
        return p

    p = add("make-corpus", cmd_make_corpus, "generate the synthetic corpus")
    p.add_argument("--out", required=True)

    p = add("generate-proposals", cmd_generate_proposals, "select one proposal per pretraining image")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--strategy", choices=["energy_sampler", "graph_segmentation"])

    p = add("make-views", cmd_make_views, "write view shards")
    p.add_argument("--proposals", required=True)
    p.add_argument("--pools", required=True, help="comma-separated pool ids or image folders")
    p.add_argument("--corpus", help="corpus that defines the pool ids")
    p.add_argument("--n-keys", type=int, choices=[1, 3], default=1)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("pretrain", cmd_pretrain, "run contrastive pretraining")
    p.add_argument("--shards")
    p.add_argument("--corpus", help="stream fresh views from a corpus instead of shards")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--deterministic", action="store_true")

    p = add("probe", cmd_probe, "linear probe on frozen embeddings", config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)

    p = add("eval-invariance", cmd_eval_invariance, "background-invariance report", config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")

    p = add("ablate", cmd_ablate, "background-pool ablation")
    p.add_argument("--matrix")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", default="ablation")

    p = add("plot", cmd_plot, "plot metrics and ablation reports", config=False)
    p.add_argument("--metrics")
    p.add_argument("--report")
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigMismatchError) as e:
        print(f"codo: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ShardFormatError, DataFormatError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"codo: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"codo: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
