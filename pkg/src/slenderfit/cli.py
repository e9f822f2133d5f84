"""Command-line entry points.

Subcommands: ``gen`` writes a synthetic labeled dataset, ``refine`` runs
one refinement job on an image + splines JSON, ``sweep`` scores
refinement methods over a dataset under perturbed or straight-line
initializations, ``eval`` recomputes summary tables from a sweep CSV,
``serve`` starts the labeling HTTP service.

Every config key is overridable either with ``--set section.key=value``
or with a flag of the same dotted name (``--optimizer.t2 800``). Exit
codes: 0 success, 1 partial or failed computation, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import traceback

import numpy as np

from .baseline_ac import snake_refine
from .config import RunConfig, load_config, version_string, _SECTION_TYPES
from .errors import (GenerationError, InvalidInputError, RefinementError)
from .geometry import KnotChain, fit_natural_cubic, resample_polyline, \
    sample_uniform
from .imgio import load_image, overlay_png_bytes, save_image
from .metrics import avg_dtw, table_report
from .optimizer import refine
from .renderer import render_scene
from .synth import (LABEL_POINTS, frame_rng, gen_labeled_frame, pca_basis,
                    perturb)

_N_STREAM = 1_000_000          # stream-index stride between body-count tiers


def _config_keys() -> list:
    keys = []
    for section, cls in _SECTION_TYPES.items():
        inst = cls()
        for f in dataclasses.fields(cls):
            v = getattr(inst, f.name)
            if dataclasses.is_dataclass(v):
                keys.extend(f"{section}.{f.name}.{g.name}"
                            for g in dataclasses.fields(v))
            else:
                keys.append(f"{section}.{f.name}")
    return keys


_CONFIG_KEYS = _config_keys()


def _dest(key: str) -> str:
    return "cfg__" + key.replace(".", "__")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE",
                        help="TOML config file (sections mirror modules)")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=V",
                        default=[], help="override one config key")
    for key in _CONFIG_KEYS:
        parser.add_argument(f"--{key}", dest=_dest(key), metavar="V",
                            help=argparse.SUPPRESS)


def _resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    for key in _CONFIG_KEYS:
        val = getattr(args, _dest(key), None)
        if val is not None:
            overrides.append(f"{key}={val}")
    return load_config(args.config, overrides)


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(
            f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def _parse_chains(obj, where: str) -> list:
    if isinstance(obj, dict) and "chains" in obj:
        obj = obj["chains"]
    if not isinstance(obj, list) or not obj:
        raise InvalidInputError(
            f"{where}: expected a nonempty list of chains or "
            '{"chains": [...]}')
    return [KnotChain.from_dict(c) for c in obj]


def _chain_polyline(chain: KnotChain, n: int = LABEL_POINTS) -> np.ndarray:
    return sample_uniform(fit_natural_cubic(chain), n)[:, :2]


# ----------------------------------------------------------------------
# gen
# ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    bodies = sorted({int(b) for b in str(args.bodies).split(",") if b})
    if not bodies or min(bodies) < 1:
        raise InvalidInputError("--bodies must list positive integers")
    os.makedirs(args.out, exist_ok=True)
    frames_dir = os.path.join(args.out, "frames")
    labels_dir = os.path.join(args.out, "labels")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(labels_dir, exist_ok=True)
    entries = []
    for n in bodies:
        gcfg = dataclasses.replace(cfg.synth, n_bodies=n)
        for idx in range(args.frames):
            stream = n * _N_STREAM + idx
            frame = gen_labeled_frame(gcfg, args.seed, stream)
            stem = f"n{n}_f{idx:04d}"
            save_image(os.path.join(frames_dir, stem + ".png"), frame.image)
            _write_json(os.path.join(labels_dir, stem + ".json"),
                        frame.label_payload())
            entries.append({"image": f"frames/{stem}.png",
                            "label": f"labels/{stem}.json",
                            "n_bodies": n, "index": idx,
                            "stream_index": stream})
    _write_json(os.path.join(args.out, "manifest.json"),
                {"kind": "slenderfit-dataset", "version": version_string(),
                 "config": cfg.to_dict(), "seed": args.seed,
                 "frames": entries})
    print(f"wrote {len(entries)} frames to {args.out}")
    return 0


# ----------------------------------------------------------------------
# refine
# ----------------------------------------------------------------------


def cmd_refine(args) -> int:
    cfg = _resolve_config(args)
    y = load_image(args.image)
    chains = _parse_chains(_read_json(args.splines), args.splines)
    os.makedirs(args.out, exist_ok=True)
    try:
        report = refine(y, chains, cfg.optimizer)
    except (RefinementError, InvalidInputError) as exc:
        print(f"refinement failed: {exc}", file=sys.stderr)
        return 1
    meta = {"version": version_string(), "config": cfg.to_dict()}
    _write_json(os.path.join(args.out, "refined.json"),
                {"chains": [c.to_dict() for c in report.chains], **meta})
    _write_json(os.path.join(args.out, "report.json"),
                {**report.to_dict(), **meta})
    if args.overlay:
        polys = [_chain_polyline(c) for c in report.chains]
        with open(os.path.join(args.out, "overlay.png"), "wb") as fh:
            fh.write(overlay_png_bytes(y, polys))
    if args.recon:
        save_image(os.path.join(args.out, "reconstruction.png"),
                   np.clip(render_scene(report.scene), 0.0, 1.0))
    print(f"refined {len(report.chains)} chain(s); "
          f"recon loss {report.final_recon_loss:.6g}")
    return 0


# ----------------------------------------------------------------------
# sweep
# ----------------------------------------------------------------------


def _parse_conditions(specs) -> list:
    kinds = ("rotation", "translation", "scaling", "pca", "straight", "none")
    out = []
    for spec in specs:
        kind, _, level = str(spec).partition(":")
        kind = kind.strip()
        if kind not in kinds:
            raise InvalidInputError(
                f"unknown perturbation kind {kind!r}; expected one of {kinds}")
        out.append((kind, float(level) if level else 0.0))
    if not out:
        raise InvalidInputError("sweep needs at least one --perturb")
    return out


def _initial_polyline(label: np.ndarray, kind: str, level: float,
                      basis, rng) -> np.ndarray:
    if kind == "straight":
        return np.linspace(label[0], label[-1], len(label))
    if kind == "none":
        return np.array(label, dtype=np.float64)
    if kind == "pca":
        return perturb(label, "pca", int(level), basis=basis)
    if kind == "translation":
        theta = rng.uniform(0.0, 2.0 * np.pi)
        return perturb(label, "translation", level,
                       direction=(np.cos(theta), np.sin(theta)))
    return perturb(label, kind, level)


def _sweep_task(task: dict) -> list:
    """Score one (frame, condition); returns CSV rows. Module-level so a
    process pool can pickle it."""
    rows = []
    base = {"frame": task["frame_id"], "n_bodies": task["n_bodies"],
            "condition": task["condition_name"]}
    try:
        y = load_image(task["image_path"])
        payload = _read_json(task["label_path"])
        labels = [np.asarray(lbl, dtype=np.float64)
                  for lbl in payload["labels"]]
        kind, level = task["condition"]
        rng = frame_rng(task["seed"] + 7919 * (1 + task["condition_idx"]),
                        task["stream_index"])
        inits = [_initial_polyline(lbl, kind, level, task.get("basis"), rng)
                 for lbl in labels]
        for b, (lbl, init) in enumerate(zip(labels, inits)):
            rows.append({**base, "body_index": b,
                         "initial_dtw": avg_dtw(init, lbl),
                         "refined_dtw": "", "baseline_dtw": "",
                         "status": "ok"})
        methods = task["methods"]
        if "ours" in methods:
            chains = [KnotChain.from_points(
                resample_polyline(init, task["fit_knots"]))
                for init in inits]
            report = refine(y, chains, task["settings"])
            for b, chain in enumerate(report.chains):
                rows[b]["refined_dtw"] = avg_dtw(_chain_polyline(chain),
                                                 labels[b])
        elif "none" in methods:
            for b, init in enumerate(inits):
                rows[b]["refined_dtw"] = avg_dtw(init, labels[b])
        if "ac" in methods:
            for b, init in enumerate(inits):
                refined = snake_refine(y, resample_polyline(init, 100))
                rows[b]["baseline_dtw"] = avg_dtw(refined, labels[b])
    except Exception as exc:  # per-frame isolation: record, keep sweeping
        status = f"error:{type(exc).__name__}"
        if not rows:
            rows = [{**base, "body_index": b, "initial_dtw": "",
                     "refined_dtw": "", "baseline_dtw": "", "status": status}
                    for b in range(task["n_bodies"])]
        else:
            for row in rows:
                row["status"] = status
    return rows


CSV_COLUMNS = ("frame", "body_index", "n_bodies", "condition",
               "initial_dtw", "refined_dtw", "baseline_dtw", "status")


def summarize_rows(rows) -> dict:
    """Condition-grouped table_report summaries, recomputable from the CSV."""
    series: dict = {}
    for row in rows:
        if row["status"] != "ok":
            continue
        key = f"{row['condition']}|n={row['n_bodies']}"
        g = series.setdefault(key, {"initial": [], "ours": [], "ac": []})
        for col, name in (("initial_dtw", "initial"), ("refined_dtw", "ours"),
                          ("baseline_dtw", "ac")):
            v = row[col]
            if v != "" and v is not None:
                g[name].append(float(v))
    summary: dict = {}
    for key, by_method in sorted(series.items()):
        groups = {name: vals for name, vals in by_method.items() if vals}
        if not groups:
            continue
        entry: dict = {}
        for trow in table_report(groups, p=0.5):
            name = trow.pop("group")
            trow["mean"] = float(np.mean(by_method[name]))
            entry[name] = trow
        summary[key] = entry
    return summary


def _print_summary(summary: dict) -> None:
    for key, entry in summary.items():
        count = next(iter(entry.values()))["count"]
        parts = [f"{key}  ({count} bodies)"]
        for name in ("initial", "ours", "ac"):
            if name in entry:
                parts.append(f"{name}: mean {entry[name]['mean']:.3f} "
                             f"top50 {entry[name]['top_mean']:.3f}")
        print("  ".join(parts))


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    manifest = _read_json(os.path.join(args.dataset, "manifest.json"))
    conditions = _parse_conditions(args.perturb)
    methods = {m.strip() for m in str(args.methods).split(",") if m.strip()}
    bad = methods - {"ours", "ac", "none"}
    if bad:
        raise InvalidInputError(f"unknown methods: {sorted(bad)}")
    frames = manifest["frames"]
    if args.limit:
        per_n: dict = {}
        kept = []
        for e in frames:
            c = per_n.get(e["n_bodies"], 0)
            if c < args.limit:
                kept.append(e)
                per_n[e["n_bodies"]] = c + 1
        frames = kept

    basis = None
    if any(kind == "pca" for kind, _ in conditions):
        corpus = []
        for e in frames:
            payload = _read_json(os.path.join(args.dataset, e["label"]))
            corpus.extend(np.asarray(lbl) for lbl in payload["labels"])
        k = max(int(level) for kind, level in conditions if kind == "pca")
        basis = pca_basis(corpus, k)

    tasks = []
    for ci, cond in enumerate(conditions):
        name = f"{cond[0]}:{cond[1]:g}"
        for e in frames:
            tasks.append({
                "frame_id": f"n{e['n_bodies']}_f{e['index']:04d}",
                "image_path": os.path.join(args.dataset, e["image"]),
                "label_path": os.path.join(args.dataset, e["label"]),
                "n_bodies": e["n_bodies"],
                "stream_index": e["stream_index"],
                "condition": cond, "condition_idx": ci,
                "condition_name": name,
                "methods": methods, "settings": cfg.optimizer,
                "fit_knots": cfg.synth.knots, "seed": manifest.get("seed", 0),
                "basis": basis,
            })

    workers = cfg.cli.workers
    results: list = [None] * len(tasks)
    if workers > 1:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_sweep_task, t): i
                       for i, t in enumerate(tasks)}
            for fut in cf.as_completed(futures):
                results[futures[fut]] = fut.result()
    else:
        for i, t in enumerate(tasks):
            results[i] = _sweep_task(t)

    rows = [row for chunk in results for row in chunk]
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sweep.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    summary = summarize_rows(rows)
    _write_json(os.path.join(args.out, "summary.json"),
                {"kind": "slenderfit-sweep", "version": version_string(),
                 "config": cfg.to_dict(), "summary": summary})
    _print_summary(summary)
    n_err = sum(1 for row in rows if row["status"] != "ok")
    if n_err:
        print(f"{n_err} of {len(rows)} rows failed", file=sys.stderr)
        return 1
    return 0


# ----------------------------------------------------------------------
# eval / serve
# ----------------------------------------------------------------------


def cmd_eval(args) -> int:
    with open(args.csv, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InvalidInputError(f"{args.csv}: no rows")
    summary = summarize_rows(rows)
    if args.out:
        _write_json(args.out, {"kind": "slenderfit-eval",
                               "version": version_string(),
                               "source": os.path.basename(args.csv),
                               "summary": summary})
    _print_summary(summary)
    return 0


def cmd_serve(args) -> int:
    cfg = _resolve_config(args)
    import uvicorn

    from .service import create_app
    app = create_app(cfg)
    uvicorn.run(app, host=cfg.service.host, port=cfg.service.port,
                log_level="warning")
    return 0


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slenderfit",
        description="Sub-pixel centerline refinement for slender bodies")
    parser.add_argument("--version", action="version",
                        version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a labeled synthetic dataset")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--frames", type=int, default=64,
                   help="frames per body-count tier (default 64)")
    p.add_argument("--bodies", default="1,2,3",
                   help="comma-separated body counts (default 1,2,3)")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("refine", help="refine splines against one image")
    p.add_argument("--image", required=True, metavar="PNG")
    p.add_argument("--splines", required=True, metavar="JSON")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--overlay", action="store_true",
                   help="also write overlay.png")
    p.add_argument("--recon", action="store_true",
                   help="also write reconstruction.png")
    _add_common(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("sweep", help="score methods over a dataset")
    p.add_argument("--dataset", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--perturb", action="append", default=[],
                   metavar="KIND:LEVEL",
                   help="rotation:20, translation:5, scaling:1.2, pca:2, "
                        "straight:0; repeatable")
    p.add_argument("--methods", default="ours,ac",
                   help="comma-set of ours,ac,none (default ours,ac)")
    p.add_argument("--limit", type=int, default=0,
                   help="cap frames per body-count tier (0 = all)")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="recompute summaries from a sweep CSV")
    p.add_argument("--csv", required=True, metavar="CSV")
    p.add_argument("--out", metavar="JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="start the labeling HTTP service")
    _add_common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GenerationError, RefinementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
