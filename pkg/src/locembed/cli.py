"""``locembed`` command line: synth, prepare, train, eval, retrieve, ablate.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Every run writes ``manifest_<subcommand>.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .contrastive import Checkpoint, TrainConfig, TrainingError, train
from .evaluation import EvalReport, ablation_table, run_ablation, run_luc, run_sdm, write_report
from .poi_data import (PoiFormatError, SynthSpec, Variant, checkerboard_spec, generate_synthetic_city, load_luc_csv,
                       load_poi_csv, load_sdm_csv, quadrant_spec, render_description, write_luc_csv, write_poi_csv,
                       write_sdm_csv)
from .retrieval import CandidateGrid, QueryError, embed_query, similarity_field, topk, write_exports
from .text_embedding import EmbeddingFormatError, fallback_store, load_embeddings, write_embeddings

log = logging.getLogger("locembed")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, sub: str, config: dict, inputs: Sequence[Path], outputs: Sequence[Path],
                    seeds, started: float) -> Path:
    manifest = {
        "subcommand": sub,
        "tool_version": __version__,
        "config": config,
        "config_hash": config.get("config_hash"),
        "inputs": {str(p): _digest(p) for p in inputs},
        "seeds": seeds,
        "outputs": [str(p) for p in outputs],
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "duration_s": round(time.time() - started, 3),
    }
    path = out / f"manifest_{sub}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _load_doc(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return doc


def _resolve(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else (base / p)


def _parse_override(items: Sequence[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def _heads(text: str) -> list[str]:
    heads = [h.strip() for h in text.split(",") if h.strip()]
    bad = [h for h in heads if h not in ("linear", "mlp")]
    if bad or not heads:
        raise UsageError(f"--heads must list linear and/or mlp, got {text!r}")
    return heads


DATA_KEYS = ("poi_csv", "vectors", "ids", "out", "luc_csv", "sdm_csv", "stores")


def _train_config(doc: dict, overrides: dict, seed: int | None) -> TrainConfig:
    fields = {k: v for k, v in doc.items() if k not in DATA_KEYS}
    fields.update(overrides)
    if seed is not None:
        fields["seed"] = seed
    try:
        cfg = TrainConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    errs = cfg.errors()
    if errs:
        raise UsageError("invalid config:\n  " + "\n  ".join(errs))
    return cfg


# --- subcommands ---------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = []
    if args.spec:
        spec = SynthSpec.load(args.spec)
        inputs.append(Path(args.spec))
    elif args.preset == "quadrant":
        spec = quadrant_spec(args.n_pois, unique_names=args.unique_names)
    else:
        spec = checkerboard_spec(args.n_pois, unique_names=args.unique_names)
    city = generate_synthetic_city(spec, args.seed)
    outputs = [out / "pois.csv", out / "luc.csv", out / "synth_spec.json"]
    write_poi_csv(city.records, outputs[0])
    write_luc_csv(city.luc_samples, outputs[1])
    outputs[2].write_text(json.dumps(spec.to_dict(), indent=1), encoding="utf-8")
    if city.sdm_regions:
        write_sdm_csv(city.sdm_regions, out / "sdm.csv")
        outputs.append(out / "sdm.csv")
    stores = {}
    if args.fallback_dim:
        for v in Variant:
            texts = [render_description(r, v).text for r in city.records]
            st = fallback_store([r.id for r in city.records], texts, args.fallback_dim, args.seed)
            vp, ip = out / f"vectors_{v.value}.gemb", out / f"ids_{v.value}.txt"
            write_embeddings(st, vp, ip)
            outputs += [vp, ip]
            stores[v.value] = {"vectors": vp.name, "ids": ip.name}
        qs = {"poi_csv": "pois.csv", "vectors": stores["name_and_type"]["vectors"],
              "ids": stores["name_and_type"]["ids"], "luc_csv": "luc.csv",
              "stores": [{"variant": k, "tag": "fallback", **v} for k, v in stores.items()],
              **TrainConfig(seed=args.seed).to_dict()}
        if city.sdm_regions:
            qs["sdm_csv"] = "sdm.csv"
        (out / "train_config.json").write_text(json.dumps(qs, indent=1), encoding="utf-8")
        outputs.append(out / "train_config.json")
    _write_manifest(out, "synth", {"spec": spec.to_dict(), "seed": args.seed, "fallback_dim": args.fallback_dim},
                    inputs, outputs, [args.seed], started)
    print(f"wrote {len(city.records)} POIs, {len(city.luc_samples)} LUC samples, "
          f"{len(city.sdm_regions)} SDM regions to {out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    started = time.time()
    src = Path(args.poi_csv)
    records = load_poi_csv(src)
    variant = Variant.parse(args.variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    texts = [render_description(r, variant).text for r in records]
    for t in texts:
        if "\n" in t or "\r" in t:
            raise UsageError(f"description contains a line break: {t!r}")
    desc, ids = out / f"descriptions_{variant.value}.txt", out / f"ids_{variant.value}.txt"
    desc.write_text("".join(t + "\n" for t in texts), encoding="utf-8")
    ids.write_text("".join(r.id + "\n" for r in records), encoding="utf-8")
    outputs = [desc, ids]
    if args.fallback_dim:
        vp = out / f"vectors_{variant.value}.gemb"
        write_embeddings(fallback_store([r.id for r in records], texts, args.fallback_dim, args.seed), vp, ids)
        outputs.append(vp)
    _write_manifest(out, "prepare", {"variant": variant.value, "fallback_dim": args.fallback_dim}, [src],
                    outputs, [args.seed], started)
    print(f"{len(texts)} descriptions -> {desc}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    cfg_path = Path(args.config)
    doc = _load_doc(cfg_path)
    base = cfg_path.parent
    cfg = _train_config(doc, _parse_override(args.set), args.seed)
    missing = [k for k in ("poi_csv", "vectors", "ids") if k not in doc]
    if missing:
        raise UsageError(f"config lacks {', '.join(missing)}")
    poi, vec, ids = (_resolve(base, doc[k]) for k in ("poi_csv", "vectors", "ids"))
    out = Path(args.out) if args.out else _resolve(base, doc.get("out", "run"))
    out.mkdir(parents=True, exist_ok=True)
    records = load_poi_csv(poi)
    store = load_embeddings(vec, ids)
    result = train(records, store, cfg)
    ckpt_path, log_path = out / "checkpoint.ckpt", out / "train_log.csv"
    result.checkpoint.save(ckpt_path)
    log_path.write_text(result.log_csv(), encoding="utf-8")
    resolved = {**cfg.to_dict(), "config_hash": cfg.config_hash(), "poi_csv": str(poi), "vectors": str(vec),
                "ids": str(ids)}
    _write_manifest(out, "train", resolved, [poi, vec, ids], [ckpt_path, log_path], [cfg.seed], started)
    last = result.log[-1]
    print(f"trained {len(result.log)} epochs; best epoch {result.checkpoint.epoch} "
          f"val {result.checkpoint.best_val_loss:.5f} (last train {last.train_loss:.5f}) -> {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    ckpt_path, data = Path(args.checkpoint), Path(args.dataset)
    ckpt = Checkpoint.load(ckpt_path)
    heads = _heads(args.heads)
    seeds = list(range(args.seeds))
    if args.task == "luc":
        report = run_luc(ckpt, load_luc_csv(data), heads, seeds)
    else:
        report = run_sdm(ckpt, load_sdm_csv(data), heads, seeds)
    out = Path(args.out)
    paths = write_report(report, out)
    _write_manifest(out, "eval", {"task": args.task, "heads": heads, "config_hash": ckpt.config_hash},
                    [ckpt_path, data], list(paths), seeds, started)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid expects WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise UsageError("grid dimensions must be positive")
    return w, h


def cmd_retrieve(args) -> int:
    started = time.time()
    ckpt_path = Path(args.checkpoint)
    ckpt = Checkpoint.load(ckpt_path)
    inputs = [ckpt_path]
    store = None
    if args.vectors:
        store = load_embeddings(args.vectors, args.ids)
        inputs += [Path(args.vectors), Path(args.ids)]
    if args.query_id is not None:
        if store is None or args.query_id not in store:
            raise QueryError(f"query id {args.query_id!r} not found in the supplied vector file")
        query, label = args.query_id, args.query_id
    elif args.query is not None:
        query, label = args.query, args.query
    else:
        raise UsageError("give --query TEXT or --query-id ID")
    w, h = _parse_grid(args.grid)
    grid = CandidateGrid.for_checkpoint(ckpt, w, h)
    if args.k > len(grid):
        raise UsageError(f"k={args.k} exceeds the {len(grid)} grid cells")
    qvec = embed_query(query, ckpt, store, allow_fallback=not args.no_fallback)
    top = topk(qvec, grid, args.k, ckpt, query=label)
    fld = similarity_field(qvec, grid, ckpt, query=label)
    out = Path(args.out)
    paths = write_exports(out, fld, top, svg=args.svg)
    _write_manifest(out, "retrieve", {"query": label, "grid": [w, h], "k": args.k,
                                      "config_hash": ckpt.config_hash}, inputs, paths, [], started)
    for rank, ((x, y), s) in enumerate(zip(top.coords, top.scores), start=1):
        print(f"{rank}\t{x:.6f}\t{y:.6f}\t{s:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = time.time()
    cfg_path = Path(args.config)
    doc = _load_doc(cfg_path)
    base = cfg_path.parent
    cfg = _train_config(doc, _parse_override(args.set), args.seed)
    if "poi_csv" not in doc or "stores" not in doc:
        raise UsageError("ablation config needs poi_csv and stores")
    wanted = [Variant.parse(v).value for v in args.variant] if args.variant else None
    records = load_poi_csv(_resolve(base, doc["poi_csv"]))
    inputs = [_resolve(base, doc["poi_csv"])]
    stores = {}
    for entry in doc["stores"]:
        variant = Variant.parse(entry["variant"]).value
        if wanted is not None and variant not in wanted:
            continue
        vp, ip = _resolve(base, entry["vectors"]), _resolve(base, entry["ids"])
        stores[(variant, entry.get("tag", "default"))] = load_embeddings(vp, ip)
        inputs += [vp, ip]
    if not stores:
        raise UsageError("no embedding store matches the requested variants")
    luc = sdm = None
    if doc.get("luc_csv"):
        luc = load_luc_csv(_resolve(base, doc["luc_csv"]))
        inputs.append(_resolve(base, doc["luc_csv"]))
    if doc.get("sdm_csv") and not args.no_sdm:
        sdm = load_sdm_csv(_resolve(base, doc["sdm_csv"]))
        inputs.append(_resolve(base, doc["sdm_csv"]))
    heads = _heads(args.heads)
    seeds = list(range(args.seeds))
    rows = run_ablation(records, stores, cfg, luc, sdm, heads, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for row in rows:
        for rep in (row.luc, row.sdm):
            if rep is not None:
                outputs += write_report(rep, out, f"{row.variant}_{row.store_tag}_{rep.task}")
    table = out / "ablation.csv"
    table.write_text(ablation_table(rows), encoding="utf-8")
    outputs.append(table)
    _write_manifest(out, "ablate", {**cfg.to_dict(), "config_hash": cfg.config_hash(),
                                    "variants": [list(k) for k in stores]}, inputs, outputs, seeds, started)
    sys.stdout.write(table.read_text(encoding="utf-8"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="locembed", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic city with LUC/SDM datasets")
    s.add_argument("--spec", help="synthetic-city JSON document")
    s.add_argument("--preset", choices=("quadrant", "checkerboard"), default="quadrant")
    s.add_argument("--n-pois", type=int, default=2000)
    s.add_argument("--unique-names", action="store_true")
    s.add_argument("--fallback-dim", type=int, default=384, help="write hashing embeddings (0 disables)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="render POI descriptions for an external text encoder")
    s.add_argument("poi_csv")
    s.add_argument("--variant", default="name_and_type")
    s.add_argument("--fallback-dim", type=int, default=0, help="also write hashing embeddings of this dim")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train the location encoder")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="probe a checkpoint on LUC or SDM data")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task", choices=("luc", "sdm"), required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--heads", default="linear,mlp")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("retrieve", help="rank grid locations against a text query")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--query", help="free text (hashing fallback unless found in --vectors)")
    s.add_argument("--query-id", help="key of a precomputed query vector in --vectors/--ids")
    s.add_argument("--vectors")
    s.add_argument("--ids")
    s.add_argument("--no-fallback", action="store_true")
    s.add_argument("--grid", default="100x100")
    s.add_argument("--k", type=int, default=30)
    s.add_argument("--svg", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("ablate", help="train and evaluate each description variant")
    s.add_argument("--config", required=True)
    s.add_argument("--variant", action="append", help="restrict to these variants (repeatable)")
    s.add_argument("--heads", default="linear,mlp")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--no-sdm", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, PoiFormatError, EmbeddingFormatError, QueryError, FileNotFoundError, KeyError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, FloatingPointError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
