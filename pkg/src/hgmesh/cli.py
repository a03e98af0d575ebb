"""Command-line entry point: ``hgmesh <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import eval_bench as eb
from . import plotting
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_run_config, write_resolved
from .generation import generate
from .hourglass import HourglassConfig, ModelError, init_model
from .mesh_io import MeshError, dequantize, load_mesh, normalize, prepare, triangulate, write_obj
from .order_fsm import DegenerateDistribution, OrderViolation, invalid_fraction, replay
from .pointcloud import augment, conditioning_cloud, read_ply, write_ply
from .procedural import GeneratorSpec, gen_procedural, load_generator_spec
from .sequencer import SequenceError, decode, encode, read_mtok, write_mtok
from .training import TrainingError, make_example, train

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INVALID_DATA = 4
EXIT_CONFIG = 5
EXIT_RUNTIME = 6

EPILOG = """exit codes:
  0  success
  1  unexpected internal error
  2  invalid flags or arguments
  3  missing or unreadable file
  4  invalid input data (OBJ parse, token framing, ordering violation)
  5  configuration error (unknown key, conflicting values)
  6  runtime failure (non-finite loss, degenerate sampling distribution)
errors are reported on stderr as: error: code=<name> exit=<n> message=<text>"""


class CliError(Exception):
    def __init__(self, code: int, name: str, message: str):
        super().__init__(message)
        self.code, self.name = code, name


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


# ---------------------------------------------------------------------- helpers


def _corpus(path) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise FileNotFoundError(path)
    files = sorted(p.glob("*.obj"))
    if not files:
        raise CliError(EXIT_INVALID_DATA, "empty-corpus", f"no .obj files in {path}")
    return files


def _depths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.replace("-", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad depths {text!r}") from None


def _cond_for(model, args, face_count: int, quad_ratio: float):
    if model.encoder is None:
        return None
    if args.points:
        cloud = read_ply(args.points)
    elif args.mesh:
        raw = load_mesh(args.mesh)
        tri, _ = triangulate(raw)
        cloud = conditioning_cloud(normalize(tri), args.num_points, args.seed)
    else:
        raise CliError(EXIT_USAGE, "usage", "conditioned model needs --points or --mesh")
    feats = torch.from_numpy(cloud.features())[None]
    with torch.no_grad():
        return model.condition(feats, face_count, quad_ratio)


# ------------------------------------------------------------------ subcommands


def cmd_encode(args):
    qm = prepare(load_mesh(args.input), args.quant_level)
    write_mtok(args.output, encode(qm), args.quant_level)
    print(f"encoded {qm.num_faces} faces -> {args.output}")


def cmd_decode(args):
    tokens, q = read_mtok(args.input)
    mesh = decode(tokens, q)
    write_obj(mesh, args.output)
    print(f"decoded {mesh.num_faces} faces -> {args.output}")


def cmd_validate(args):
    for path in args.inputs:
        tokens, q = read_mtok(path)
        state = replay(tokens, q)
        print(f"ok {path} faces={state.faces_emitted}")


def cmd_stats(args):
    meshes = [load_mesh(p) for p in _corpus(args.meshes)]
    rows = []
    for q in args.quant_level:
        seqs = [encode(prepare(m, q)) for m in meshes]
        st = invalid_fraction(seqs, q)
        row = {"Q": q, "mean_invalid_fraction": st.mean_fraction}
        row.update({f"slot_{k}": v for k, v in enumerate(st.per_slot)})
        row["positions"] = st.positions
        rows.append(row)
    if args.output:
        eb.write_csv(args.output, rows)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)


def cmd_sample_points(args):
    raw = load_mesh(args.input)
    tri, _ = triangulate(raw)
    cloud = conditioning_cloud(normalize(tri), args.points, args.seed, oversample=args.oversample)
    if args.noise:
        cloud = augment(cloud, seed=args.seed)
    write_ply(cloud, args.output)
    print(f"wrote {len(cloud)} points -> {args.output}")


def cmd_gen_dataset(args):
    spec = load_generator_spec(args.spec) if args.spec else GeneratorSpec(family=args.family)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.count):
        seed = args.seed + i
        mesh = gen_procedural(seed, spec)
        name = f"mesh_{i:05d}.obj"
        write_obj(mesh, out / name)
        tri, _ = triangulate(mesh)
        rows.append({"file": name, "seed": seed, "vertices": len(mesh.vertices),
                     "polygons": len(mesh.faces), "triangles": len(tri.faces),
                     "quad_ratio": f"{mesh.quad_ratio:.6f}"})
    eb.write_csv(out / "manifest.csv", rows)
    with open(out / "generator.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
    print(f"wrote {args.count} meshes -> {out}")


def cmd_train(args):
    cfg = load_run_config(args.config, args.set)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "resolved_config.toml")
    mcfg, tcfg = cfg.model_config(), cfg.train_config()
    npts = cfg.data.num_points if mcfg.conditioning else None
    if args.data:
        meshes = [load_mesh(p) for p in _corpus(args.data)]
    else:
        spec = GeneratorSpec(family=cfg.data.family)
        meshes = [gen_procedural(cfg.data.seed + i, spec) for i in range(cfg.data.count)]
    examples = [make_example(m, mcfg.quant_level, npts, cfg.data.seed + i) for i, m in enumerate(meshes)]
    model = init_model(mcfg, tcfg.seed)
    rows = train(model, examples, tcfg, out / "metrics.csv",
                 progress=None if args.quiet else lambda r: print(
                     f"step {r['step']} loss {r['loss']:.4f} lr {r['lr']:.2e} tok/s {r['tokens_per_s']:.0f}"))
    save_checkpoint(out / "model.mtck", model, {"steps": tcfg.steps, "examples": len(examples)})
    if rows:
        plotting.plot_training(rows, out / "metrics.png")
    print(f"checkpoint -> {out / 'model.mtck'}")


def cmd_generate(args):
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    cond = _cond_for(model, args, args.faces, args.quad_ratio)
    res = generate(model, cond, args.faces, seed=args.seed, temperature=args.temperature,
                   use_cache=not args.no_cache)
    mesh = res.mesh(model.cfg.quant_level)
    write_obj(mesh, args.output)
    info = {"faces": mesh.num_faces, "faces_emitted": res.faces, "halt_reason": res.halt_reason,
            "face_count_condition": args.faces, "seed": args.seed, "temperature": args.temperature}
    with open(f"{args.output}.json", "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
    print(f"generated {mesh.num_faces} faces (halt: {res.halt_reason}) -> {args.output}")


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    q = model.cfg.quant_level
    files = _corpus(args.data)[: args.limit or None]
    meshes = [load_mesh(p) for p in files]
    losses, chamfer_rows = [], []
    for i, (path, raw) in enumerate(zip(files, meshes)):
        qm = prepare(raw, q)
        cond = None
        if model.encoder is not None:
            tri, _ = triangulate(raw)
            cloud = conditioning_cloud(normalize(tri), args.num_points, args.seed + i)
            with torch.no_grad():
                cond = model.condition(torch.from_numpy(cloud.features())[None], qm.num_faces, raw.quad_ratio)
        losses.append(eb.coordinate_losses(model, encode(qm), cond))
        if cond is not None and i < args.chamfer_trials:
            gt = normalize(triangulate(raw)[0])
            res = generate(model, cond, qm.num_faces, seed=args.seed + i, temperature=args.temperature)
            gen = res.mesh(q)
            value = eb.mesh_chamfer(gt, dequantize(gen), args.samples, args.seed + i)
            floor = eb.quantization_floor(gt, q, args.samples, args.seed + i)
            chamfer_rows.append({"file": path.name, "chamfer": value, "floor": floor,
                                 "ratio": value / floor, "halt_reason": res.halt_reason})
    profile = eb.ppl_profile(losses)
    est, lo, hi = eb.bootstrap_margin(losses, seed=args.seed)
    eb.write_csv(out / "ppl_profile.csv", [{"slot": k, "mean_loss": v} for k, v in enumerate(profile)])
    plotting.plot_profile(profile, out / "ppl_profile.png")
    summary = {"meshes": len(losses), "margin_third_minus_first": est, "margin_ci_low": lo,
               "margin_ci_high": hi}
    if chamfer_rows:
        eb.write_csv(out / "chamfer.csv", chamfer_rows)
        plotting.plot_chamfer([r["chamfer"] for r in chamfer_rows], [r["floor"] for r in chamfer_rows],
                              out / "chamfer.png")
        summary["chamfer_within_3x_floor"] = float(np.mean([r["ratio"] <= 3 for r in chamfer_rows]))
    if args.extrapolate:
        seqs = [encode(prepare(m, q)) for m in meshes]
        res = eb.swa_extrapolation_eval(model, seqs, model.cfg.window, args.extrapolate)
        eb.write_csv(out / "extrapolation.csv", [
            {"position": t + 1, "loss_swa": a, "loss_full": b}
            for t, (a, b) in enumerate(zip(res.per_position_swa, res.per_position_full))])
        plotting.plot_extrapolation(res.per_position_swa, res.per_position_full, res.chunk,
                                    out / "extrapolation.png")
        summary.update(ppl_swa_total=res.ppl_swa_total, ppl_at_chunk=res.ppl_at_chunk,
                       ppl_near_chunk=res.ppl_near_chunk,
                       ppl_swa_beyond=res.ppl_swa_beyond, ppl_full_beyond=res.ppl_full_beyond)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_cost_model(args):
    depths = args.depths or [(24,), (8, 8, 8), (4, 8, 12)]
    reports = []
    for d in depths:
        cfg = HourglassConfig(depths=d, channels=args.channels, head_channels=args.head_channels,
                              ffn_hidden=args.ffn_hidden, window=args.window or _round9(args.length))
        reports.append(eb.cost_model(cfg, args.length).row())
    print(f"{'config':<12}{'total GFLOP':>14}{'attn GFLOP':>14}{'ffn GFLOP':>14}{'KV MiB':>10}")
    for r in reports:
        print(f"{r['label']:<12}{r['total_flops'] / 1e9:>14.2f}{r['attention_flops'] / 1e9:>14.2f}"
              f"{r['ffn_flops'] / 1e9:>14.2f}{r['kv_bytes'] / 2 ** 20:>10.1f}")
    if args.output:
        eb.write_csv(args.output, reports)
        plotting.plot_costs(reports, Path(args.output).with_suffix(".png"))


def _round9(n: int) -> int:
    return max(9, n - n % 9)


def cmd_bench(args):
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = HourglassConfig(depths=args.depths, channels=args.channels, window=args.window,
                              conditioning=False, ffn_hidden=int(args.channels * 2.75))
        model = init_model(cfg, args.seed)
    model.eval()
    cond = None
    if model.encoder is not None:
        with torch.no_grad():
            cond = model.condition(torch.randn(1, 64, 6, generator=torch.Generator().manual_seed(args.seed)),
                                   100, 0.0)
    W = model.cfg.window
    lengths = args.lengths or [W * k for k in (1, 2, 4, 8)]
    rows = eb.throughput_bench(model, lengths, True, cond, probe=args.probe)
    if not args.skip_recompute:
        rows += eb.throughput_bench(model, [n for n in lengths if n <= 4 * W], False, cond)
    rows = [r.__dict__ for r in rows]
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    eb.write_csv(out, rows)
    plotting.plot_throughput(rows, out.with_suffix(".png"))
    for r in rows:
        print(f"length={r['length']} cache={r['rolling_cache']} tok/s={r['tokens_per_s']:.1f} "
              f"peak_entries={r['peak_cache_entries']} threads={r['threads']}")


# ----------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hgmesh", description="Hourglass mesh-sequence toolkit",
                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("encode", help="OBJ -> MTOK token file")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--quant-level", type=int, default=128)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="MTOK -> OBJ")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("validate", help="check MTOK files against the ordering machine")
    s.add_argument("inputs", nargs="+")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("stats", help="invalid-category fraction CSV for a mesh corpus")
    s.add_argument("meshes", help="OBJ file or directory")
    s.add_argument("--quant-level", type=int, nargs="+", default=[128, 1024])
    s.add_argument("--output")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("sample-points", help="OBJ -> PLY conditioning cloud")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--points", type=int, default=1024)
    s.add_argument("--oversample", type=int, default=4)
    s.add_argument("--noise", action="store_true", help="apply training-time augmentation")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample_points)

    s = sub.add_parser("gen-dataset", help="procedural OBJ corpus with manifest")
    s.add_argument("output")
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--family", default="mixed")
    s.add_argument("--spec", help="generator TOML file")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("train", help="train a model; writes checkpoint, metrics CSV and config")
    s.add_argument("output")
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    s.add_argument("--data", help="OBJ corpus (default: procedural from [data])")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="sample a mesh from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("output")
    s.add_argument("--faces", type=int, required=True, help="face-count condition")
    s.add_argument("--quad-ratio", type=float, default=0.0)
    s.add_argument("--points", help="PLY conditioning cloud")
    s.add_argument("--mesh", help="OBJ to sample a conditioning cloud from")
    s.add_argument("--num-points", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--no-cache", action="store_true", help="recompute the prefix every step")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("eval", help="loss profile, Chamfer and window-extrapolation CSVs")
    s.add_argument("checkpoint")
    s.add_argument("data")
    s.add_argument("output")
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--num-points", type=int, default=256)
    s.add_argument("--chamfer-trials", type=int, default=0)
    s.add_argument("--samples", type=int, default=10_000)
    s.add_argument("--temperature", type=float, default=0.0)
    s.add_argument("--extrapolate", type=int, default=0, metavar="LENGTH")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cost-model", help="closed-form FLOP / KV table")
    s.add_argument("--depths", type=_depths, action="append")
    s.add_argument("--length", type=int, default=9216)
    s.add_argument("--window", type=int, default=0, help="default: the full length")
    s.add_argument("--channels", type=int, default=1024)
    s.add_argument("--head-channels", type=int, default=64)
    s.add_argument("--ffn-hidden", type=int, default=2816)
    s.add_argument("--output")
    s.set_defaults(func=cmd_cost_model)

    s = sub.add_parser("bench", help="decode throughput vs context length")
    s.add_argument("output", help="CSV path; a PNG is written beside it")
    s.add_argument("--checkpoint")
    s.add_argument("--depths", type=_depths, default=(2, 2, 2))
    s.add_argument("--channels", type=int, default=128)
    s.add_argument("--window", type=int, default=1152)
    s.add_argument("--lengths", type=int, nargs="+")
    s.add_argument("--probe", type=int, default=128)
    s.add_argument("--skip-recompute", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)
    return p


_ERRORS = [
    (CliError, None, None),
    (FileNotFoundError, EXIT_IO, "missing-file"),
    (IsADirectoryError, EXIT_IO, "io"),
    (PermissionError, EXIT_IO, "io"),
    (ConfigError, EXIT_CONFIG, "config"),
    (OrderViolation, EXIT_INVALID_DATA, "order-violation"),
    (SequenceError, EXIT_INVALID_DATA, "sequence"),
    (MeshError, EXIT_INVALID_DATA, "mesh"),
    (CheckpointError, EXIT_INVALID_DATA, "checkpoint"),
    (ModelError, EXIT_CONFIG, "model-config"),
    (DegenerateDistribution, EXIT_RUNTIME, "degenerate-distribution"),
    (TrainingError, EXIT_RUNTIME, "training"),
    (OSError, EXIT_IO, "io"),
]


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise CliError(EXIT_USAGE, "usage", "--threads must be >= 1")
        torch.set_num_threads(args.threads)
        args.func(args)
        return EXIT_OK
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        for cls, code, name in _ERRORS:
            if isinstance(exc, cls):
                if cls is CliError:
                    code, name = exc.code, exc.name
                break
        else:
            code, name = EXIT_INTERNAL, "internal"
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: code={name} exit={code} message={message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
