"""Command-line entry point.

Subcommands: patchify, saliency, export-signals, import-check, intervene,
stats, cluster {fit,assign,loss}, rope-check. Flags are long-form only; a
JSON config file can supply any flag value (key = flag name). Outputs embed
the resolved run configuration and are byte-identical across reruns.

Exit codes: 1 I/O, 2 config, 3 invariant violation, 4 infeasible budget.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CodecPatchError, ConfigError, InputFormatError
from .ingest import load_clip, partition_gops
from .motion import (
    DEFAULT_BLOCK_SIZE,
    DEFAULT_SEARCH_RANGE,
    estimate_clip_motion,
    export_signals,
    import_codec_signals,
)
from .saliency import (
    FusionConfig,
    allocate_clip_budget,
    allocate_gop_budget,
    frame_saliency,
    heatmap_image,
    select_mask_fixed_ratio,
)
from .patchify import (
    DEFAULT_GRID_T,
    FRAME_TYPE_P,
    intervene,
    patchify_chunk,
    patchify_codec,
    patchify_image,
    token_accounting,
)
from .layout_io import dump_json, read_layout, write_layout
from . import cluster as cl
from .rope import PositionTriple, RopeConfig, position_for_mode, rotate

TOOL = f"codecpatch {__version__}"


# ---------------------------------------------------------------------------
# config plumbing

def _apply_config(args: argparse.Namespace, argv: list[str]) -> None:
    """Overlay config-file values onto parsed args.

    Keys are flag names; values supply any flag not explicitly present on
    the command line (explicit flags win).
    """
    try:
        values = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"config {args.config} must hold a JSON object")
    for key, value in values.items():
        flag = "--" + key.replace("_", "-")
        dest = key.replace("-", "_")
        if dest in ("config", "func"):
            continue
        if not hasattr(args, dest):
            raise ConfigError(f"config key {key!r} is not a flag of this command")
        if flag in argv:
            continue
        setattr(args, dest, value)


# execution knobs that do not affect output content stay out of the
# embedded run configuration so e.g. --jobs 8 reproduces --jobs 1 exactly
_NON_SEMANTIC_ARGS = ("func", "jobs", "config")


def _run_config(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items())
           if k not in _NON_SEMANTIC_ARGS}
    cfg["tool_version"] = TOOL
    return cfg


def _require(args, *names):
    """Presence check deferred from argparse so --config can supply flags."""
    for name in names:
        if getattr(args, name, None) is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required")


def _fusion(args) -> FusionConfig:
    return FusionConfig(alpha=args.alpha,
                        camera_compensation=args.camera_compensation)


def _clip_signals(args, clip, gops):
    if getattr(args, "signals", None):
        return import_codec_signals(args.signals, clip, gops)
    return estimate_clip_motion(clip, gops, block_size=args.block_size,
                                search_range=args.search_range)


def _p_frame_grids(args, clip, gops, signals):
    fusion = _fusion(args)
    return [frame_saliency(signals[t][0], signals[t][1], clip.patch_size, fusion)
            for t in gops.p_frame_indices()]


# ---------------------------------------------------------------------------
# patchify

def _build_layout(args, input_path):
    clip = load_clip(input_path, args.height, args.width, args.patch_size)
    if args.mode == "image":
        return clip, patchify_image(clip, grid_t=args.grid_t), None
    if args.mode == "chunk":
        layout = patchify_chunk(clip, args.chunks, args.seed, grid_t=args.grid_t)
        return clip, layout, None
    gops = partition_gops(clip, args.gop_length)
    signals = _clip_signals(args, clip, gops)
    grids = _p_frame_grids(args, clip, gops, signals)
    p0 = clip.patches_per_frame
    if args.ratio is not None:
        masks = [select_mask_fixed_ratio(g, args.ratio) for g in grids]
        budget_meta = {"budget": None, "r": args.ratio}
    else:
        budget = args.budget if args.budget is not None else 2048
        i_frames = len(gops.segments)
        if args.budget_scope == "gop":
            masks = allocate_gop_budget(grids, gops, budget, i_frames, p0)
        else:
            masks = allocate_clip_budget(grids, budget, i_frames, p0)
        budget_meta = {"budget": budget, "r": None}
    layout = patchify_codec(clip, gops, masks, grid_t=args.grid_t,
                            budget_meta=budget_meta)
    return clip, layout, gops


def _accounting_report(layout, dense_t) -> str:
    acct = token_accounting(layout, dense_t)
    lines = [f"tokens M={acct['M']} gamma={acct['gamma']:.6g} "
             f"(dense {dense_t} frames)"]
    if acct["per_gop"]:
        lines.append("gop start length tokens gamma")
        for row in acct["per_gop"]:
            lines.append(f"{row['gop']} {row['start']} {row['length']} "
                         f"{row['tokens']} {row['gamma']:.6g}")
    return "\n".join(lines)


def cmd_patchify(args) -> int:
    _require(args, "output_dir")
    if args.budget is not None and args.ratio is not None:
        raise ConfigError("--budget and --ratio are mutually exclusive")
    if args.signals and len(args.inputs) != 1:
        raise ConfigError("--signals only applies to a single input")
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    run_config = _run_config(args)

    def one(input_path):
        clip, layout, _ = _build_layout(args, input_path)
        base = outdir / clip.source_id
        rc = dict(run_config, layout_input=str(input_path))
        write_layout(base, layout, rc)
        return (f"{clip.source_id}: mode={layout.mode} "
                f"tokens={layout.token_count}\n"
                + _accounting_report(layout, clip.num_frames))

    reports = _parallel_map(one, args.inputs, args.jobs)
    for report in reports:
        print(report)
    return 0


def _parallel_map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# saliency

def _format_float(v: float) -> str:
    return f"{v:.9g}"


def cmd_saliency(args) -> int:
    _require(args, "output_dir")
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    run_config = _run_config(args)
    config_comment = json.dumps(run_config, sort_keys=True)

    def one(input_path):
        clip = load_clip(input_path, args.height, args.width, args.patch_size)
        gops = partition_gops(clip, args.gop_length)
        signals = _clip_signals(args, clip, gops)
        grids = _p_frame_grids(args, clip, gops, signals)
        lines = [f"# {TOOL}", f"# config: {config_comment}",
                 "# columns: t y x motion_sum residual_sum fused"]
        for grid in grids:
            heat = heatmap_image(grid, clip.patch_size)
            heat_path = outdir / f"{clip.source_id}.heat.{grid.frame_index:05d}.ppm"
            with open(heat_path, "wb") as f:
                f.write(b"P6\n# config: %s\n%d %d\n255\n"
                        % (config_comment.encode(), heat.shape[1], heat.shape[0]))
                f.write(heat.tobytes())
            for i in range(grid.grid_h * grid.grid_w):
                y, x = divmod(i, grid.grid_w)
                lines.append(
                    f"{grid.frame_index} {y} {x} "
                    f"{_format_float(grid.motion_sum[i])} "
                    f"{_format_float(grid.residual_sum[i])} "
                    f"{_format_float(grid.scores[i])}")
        scores_path = outdir / f"{clip.source_id}.scores.txt"
        scores_path.write_text("\n".join(lines) + "\n")
        return f"{clip.source_id}: {len(grids)} P-frames scored"

    for report in _parallel_map(one, args.inputs, args.jobs):
        print(report)
    return 0


# ---------------------------------------------------------------------------
# signals

def cmd_export_signals(args) -> int:
    _require(args, "input", "output")
    clip = load_clip(args.input, args.height, args.width, args.patch_size)
    gops = partition_gops(clip, args.gop_length)
    signals = estimate_clip_motion(clip, gops, block_size=args.block_size,
                                   search_range=args.search_range)
    export_signals(args.output, clip, gops, signals)
    Path(str(args.output) + ".json").write_text(dump_json(_run_config(args)))
    print(f"wrote {args.output}: {len(signals)} P-frame records")
    return 0


def cmd_import_check(args) -> int:
    _require(args, "input", "signals")
    clip = load_clip(args.input, args.height, args.width, args.patch_size)
    gops = partition_gops(clip, args.gop_length)
    signals = import_codec_signals(args.signals, clip, gops)
    block = next(iter(signals.values()))[0].block_size if signals else 0
    print(f"ok: {len(signals)} P-frame records, block={block}, "
          f"frames={clip.num_frames}")
    return 0


# ---------------------------------------------------------------------------
# intervene

def cmd_intervene(args) -> int:
    _require(args, "layout", "kind", "output_dir")
    layout, meta = read_layout(args.layout)
    donor = None
    if args.donor:
        donor, _ = read_layout(args.donor)
    clip = None
    if args.kind == "nonmotion_swap":
        clip_path = args.clip
        rc = meta.get("run_config", {})
        if clip_path is None:
            clip_path = rc.get("layout_input")
        if clip_path is None:
            raise ConfigError(
                "nonmotion_swap needs --clip (source clip not recoverable "
                "from layout metadata)")
        if "height" not in rc or "width" not in rc:
            raise ConfigError(
                "layout metadata lacks clip geometry; rebuild the layout or "
                "point --layout at a file written by this tool")
        clip = load_clip(clip_path, int(rc["height"]), int(rc["width"]),
                         layout.patch_size)
    result = intervene(layout, args.kind, donor=donor, seed=args.seed,
                       clip=clip)
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    base = outdir / f"{layout.clip_ref}.{args.kind}"
    write_layout(base, result, _run_config(args))
    print(f"{layout.clip_ref}: {args.kind} -> {result.token_count} tokens")
    return 0


# ---------------------------------------------------------------------------
# stats

def _stats_report(layouts, metas) -> str:
    def grid_dims(layout, meta):
        rc = meta.get("run_config", {})
        if "height" in rc and "width" in rc:
            return (int(rc["height"]) // layout.patch_size,
                    int(rc["width"]) // layout.patch_size)
        return (int(layout.positions[:, 1].max()) + 1,
                int(layout.positions[:, 2].max()) + 1)

    gh, gw = grid_dims(layouts[0], metas[0])
    grid_t = layouts[0].grid_t
    for layout, meta in zip(layouts, metas):
        if layout.grid_t != grid_t or grid_dims(layout, meta) != (gh, gw):
            raise InputFormatError("layouts disagree on grid geometry")

    hist = np.zeros((gh, gw), dtype=np.int64)
    accum = np.zeros(grid_t, dtype=np.int64)
    radial = []
    for l in layouts:
        sel = l.frame_types == FRAME_TYPE_P
        if not sel.any():
            sel = np.ones(l.token_count, dtype=bool)
        pos = l.positions[sel]
        np.add.at(hist, (pos[:, 1], pos[:, 2]), 1)
        np.add.at(accum, np.minimum(pos[:, 0], grid_t - 1), 1)
        u = (pos[:, 1] + 0.5) / gh - 0.5
        v = (pos[:, 2] + 0.5) / gw - 0.5
        radial.append(np.sqrt(u * u + v * v) / (np.sqrt(2.0) / 2.0))
    center_bias = float(np.concatenate(radial).mean())

    lines = [f"# {TOOL} stats", f"# layouts: {len(layouts)}",
             f"[histogram] {gh} {gw}"]
    for row in hist:
        lines.append(" ".join(str(int(c)) for c in row))
    lines.append("[accumulation] t tokens cumulative")
    running = 0
    for t in range(grid_t):
        running += int(accum[t])
        lines.append(f"{t} {int(accum[t])} {running}")
    lines.append(f"[center-bias] {_format_float(center_bias)}")
    return "\n".join(lines) + "\n"


def cmd_stats(args) -> int:
    loaded = [read_layout(path) for path in args.layouts]
    report = _stats_report([l for l, _ in loaded], [m for _, m in loaded])
    if args.output:
        Path(args.output).write_text(report)
    else:
        sys.stdout.write(report)
    return 0


# ---------------------------------------------------------------------------
# cluster

def cmd_cluster_fit(args) -> int:
    _require(args, "embeddings", "k", "output")
    embeddings = cl.load_embeddings(args.embeddings)
    bank = cl.kmeans(embeddings, args.k, iters=args.iters, seed=args.seed)
    cl.write_vectors(args.output, bank.centroids, bank.modality)
    print(f"fit {bank.modality} bank: K={bank.k} D={bank.centroids.shape[1]}")
    return 0


def cmd_cluster_assign(args) -> int:
    _require(args, "embeddings", "bank", "output")
    embeddings = cl.load_embeddings(args.embeddings)
    vectors, modality = cl.read_vectors(args.bank)
    bank = cl.CentroidBank(centroids=vectors, modality=modality)
    assignments = {
        e.sample_id: list(cl.assign_topL(e, bank, args.top_l).positives)
        for e in embeddings
    }
    payload = {"tool_version": TOOL, "modality": modality,
               "top_l": args.top_l, "assignments": assignments,
               "run_config": _run_config(args)}
    Path(args.output).write_text(dump_json(payload))
    print(f"assigned {len(assignments)} samples to top-{args.top_l} centroids")
    return 0


def cmd_cluster_loss(args) -> int:
    batch: list[cl.Embedding] = []
    banks = []
    for emb_path, bank_path in ((args.obj_embeddings, args.obj_bank),
                                (args.vid_embeddings, args.vid_bank)):
        if emb_path is None and bank_path is None:
            continue
        if emb_path is None or bank_path is None:
            raise ConfigError("each modality needs both embeddings and bank")
        batch.extend(cl.load_embeddings(emb_path))
        vectors, modality = cl.read_vectors(bank_path)
        banks.append(cl.CentroidBank(centroids=vectors, modality=modality))
    if not banks:
        raise ConfigError("no embeddings given")
    if len(banks) == 2:
        bank = cl.CentroidBank.union(banks[0], banks[1])
    else:
        bank = banks[0]
    assignments = [cl.assign_topL(e, bank, args.top_l) for e in batch]
    result = cl.discrimination_loss(batch, bank, assignments,
                                    neg_ratio=args.neg_ratio, seed=args.seed)
    report = {
        "tool_version": TOOL,
        "loss": result["loss"],
        "pairs": len(result["pairs"]),
        "grad_e_norm": float(np.linalg.norm(result["grad_e"])),
        "grad_c_norm": float(np.linalg.norm(result["grad_c"])),
        "run_config": _run_config(args),
    }
    if args.output:
        Path(args.output).write_text(dump_json(report))
    print(f"loss={result['loss']:.9g} pairs={len(result['pairs'])}")
    return 0


# ---------------------------------------------------------------------------
# rope fixtures

def cmd_rope_check(args) -> int:
    _require(args, "output")
    try:
        split = tuple(int(s) for s in args.split.split(":"))
    except ValueError:
        raise ConfigError(f"bad split {args.split!r}, expected T:H:W") from None
    cfg = RopeConfig(head_dim=args.head_dim, split=split, base=args.base)
    rng = np.random.default_rng(args.seed)
    modes = ("codec", "chunk", "image")
    records = []
    for i in range(args.count):
        mode = modes[i % len(modes)]
        q = rng.standard_normal(cfg.head_dim)
        k = rng.standard_normal(cfg.head_dim)
        pos_q = PositionTriple(int(rng.integers(0, 64)), int(rng.integers(0, 32)),
                               int(rng.integers(0, 32)))
        pos_k = PositionTriple(int(rng.integers(0, 64)), int(rng.integers(0, 32)),
                               int(rng.integers(0, 32)))
        eff_q = position_for_mode(pos_q, mode)
        eff_k = position_for_mode(pos_k, mode)
        rq = rotate(q, eff_q, cfg)
        rk = rotate(k, eff_k, cfg)
        records.append({
            "mode": mode,
            "pos_q": [pos_q.t, pos_q.y, pos_q.x],
            "pos_k": [pos_k.t, pos_k.y, pos_k.x],
            "q": q.tolist(), "k": k.tolist(),
            "rotated_q": rq.tolist(), "rotated_k": rk.tolist(),
            "score": float(rq @ rk),
        })
    payload = {
        "format": "rope-fixture", "version": 1, "tool_version": TOOL,
        "config": {"head_dim": cfg.head_dim, "split": list(cfg.split),
                   "base": cfg.base},
        "records": records,
        "run_config": _run_config(args),
    }
    Path(args.output).write_text(dump_json(payload))
    print(f"wrote {args.output}: {len(records)} records")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_geometry(p):
    p.add_argument("--height", type=int, default=224)
    p.add_argument("--width", type=int, default=224)
    p.add_argument("--patch-size", type=int, default=14)


def _add_signal_flags(p):
    p.add_argument("--gop-length", type=int, default=32)
    p.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    p.add_argument("--search-range", type=int, default=DEFAULT_SEARCH_RANGE)
    p.add_argument("--signals", default=None,
                   help="sidecar .sig file instead of the built-in estimator")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--camera-compensation", action="store_true", default=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codecpatch",
        description="codec-guided sparse video patchification toolkit")
    parser.add_argument("--version", action="version", version=TOOL)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("patchify", help="build token layouts")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=("codec", "chunk", "image"),
                   default="codec")
    p.add_argument("--output-dir", default=None)
    _add_geometry(p)
    _add_signal_flags(p)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--budget-scope", choices=("clip", "gop"), default="clip")
    p.add_argument("--chunks", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-t", type=int, default=DEFAULT_GRID_T)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_patchify)

    p = sub.add_parser("saliency", help="emit heatmaps and score dumps")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--config", default=None)
    p.add_argument("--output-dir", default=None)
    _add_geometry(p)
    _add_signal_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("export-signals",
                       help="run the estimator and write a sidecar")
    p.add_argument("--config", default=None)
    p.add_argument("--input", default=None)
    p.add_argument("--output", default=None)
    _add_geometry(p)
    p.add_argument("--gop-length", type=int, default=32)
    p.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    p.add_argument("--search-range", type=int, default=DEFAULT_SEARCH_RANGE)
    p.set_defaults(func=cmd_export_signals)

    p = sub.add_parser("import-check", help="validate a sidecar against a clip")
    p.add_argument("--config", default=None)
    p.add_argument("--input", default=None)
    p.add_argument("--signals", default=None)
    _add_geometry(p)
    p.add_argument("--gop-length", type=int, default=32)
    p.set_defaults(func=cmd_import_check)

    p = sub.add_parser("intervene", help="apply a layout intervention")
    p.add_argument("--config", default=None)
    p.add_argument("--layout", default=None)
    p.add_argument("--kind", required=True,
                   choices=("nonmotion_swap", "crossvideo_swap",
                            "position_shuffle"))
    p.add_argument("--donor", default=None)
    p.add_argument("--clip", default=None,
                   help="source clip for nonmotion_swap (defaults to the "
                        "input recorded in the layout)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_intervene)

    p = sub.add_parser("stats", help="selection statistics over layouts")
    p.add_argument("layouts", nargs="+")
    p.add_argument("--config", default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("cluster", help="centroid bank tools")
    csub = p.add_subparsers(dest="cluster_command", required=True)

    c = csub.add_parser("fit")
    c.add_argument("--config", default=None)
    c.add_argument("--embeddings", default=None)
    c.add_argument("--k", type=int, default=None)
    c.add_argument("--iters", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--output", default=None)
    c.set_defaults(func=cmd_cluster_fit)

    c = csub.add_parser("assign")
    c.add_argument("--config", default=None)
    c.add_argument("--embeddings", default=None)
    c.add_argument("--bank", default=None)
    c.add_argument("--top-l", type=int, default=cl.DEFAULT_TOP_L)
    c.add_argument("--output", default=None)
    c.set_defaults(func=cmd_cluster_assign)

    c = csub.add_parser("loss")
    c.add_argument("--config", default=None)
    c.add_argument("--obj-embeddings", default=None)
    c.add_argument("--obj-bank", default=None)
    c.add_argument("--vid-embeddings", default=None)
    c.add_argument("--vid-bank", default=None)
    c.add_argument("--top-l", type=int, default=cl.DEFAULT_TOP_L)
    c.add_argument("--neg-ratio", type=float, default=cl.DEFAULT_NEG_RATIO)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--output", default=None)
    c.set_defaults(func=cmd_cluster_loss)

    p = sub.add_parser("rope-check", help="emit rotation agreement fixtures")
    p.add_argument("--config", default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--split", default="4:6:6")
    p.add_argument("--base", type=float, default=10000.0)
    p.add_argument("--count", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rope_check)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            _apply_config(args, argv)
        return args.func(args)
    except CodecPatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
