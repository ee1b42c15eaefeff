"""Command line entry point: ``fkd <command> [--config run.json] [--set key=value ...]``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import label_store as ls
from .analysis import emit_report, run_mismatch_scenario
from .pipeline import (BatchPlan, DiskStore, assemble_batch, generate_store, loader_cost_model)
from .quantize import FULL, HARD, SMOOTH, Kind, marginal_renorm_mode, marginal_smooth_mode
from .train import (TrainConfig, load_checkpoint, predict, save_checkpoint, train_student,
                    vanilla_kd_reference, write_metrics)

log = logging.getLogger("fkd")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args):
    return config_mod.load(args.config, args.overrides)


def _write_run_metadata(directory, cfg, name="run.json"):
    Path(directory).mkdir(parents=True, exist_ok=True)
    (Path(directory) / name).write_text(config_mod.dumps(cfg))


# ---------------------------------------------------------------- commands

def cmd_generate(args, out):
    cfg = _config(args)
    root = Path(cfg.paths.store)
    mode = cfg.labels.quantization
    _, written = generate_store(cfg.world, cfg.teacher, cfg.labels.num_crops, cfg.crop, mode,
                                cfg.labels.seed, root=root)
    _write_run_metadata(root, cfg)
    model = ls.StorageModel(cfg.world.num_images, cfg.labels.num_crops, cfg.teacher.num_classes)
    estimate = ls.estimate_fkd_storage(model, mode)
    payload = written - cfg.world.num_images * ls.HEADER_SIZE
    rel = (payload - estimate) / estimate if estimate else 0.0
    print(f"generated {cfg.world.num_images} label files ({mode.name}, M={cfg.labels.num_crops}) "
          f"in {root}: {written} bytes written, {payload} after headers, "
          f"estimate {estimate} bytes ({rel:+.2%})", file=out)
    return EXIT_OK


def cmd_train(args, out):
    cfg = _config(args)
    root = Path(cfg.paths.store)
    outdir = Path(cfg.paths.output)
    store = DiskStore(root)
    store.resolution = cfg.crop.resolution
    outdir.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state, _ = load_checkpoint(args.resume)
    ckpt = outdir / ("oracle.npz" if args.oracle else "checkpoint.npz")

    def on_pass_end(st):
        save_checkpoint(ckpt, st, cfg.train)

    stop = args.stop_after
    if args.oracle:
        images = [np.load(store.image_path(i)) for i in range(len(store))]
        state = vanilla_kd_reference(images, cfg.teacher, cfg.train, cfg.crop, cfg.labels.seed,
                                     cfg.labels.num_crops, state=state, stop_after=stop)
    else:
        ssl = cfg.labels.quantization.kind == Kind.SSL_LOGITS
        state = train_student(store, cfg.train, state=state, stop_after=stop,
                              on_pass_end=on_pass_end, ssl=ssl)
    save_checkpoint(ckpt, state, cfg.train)
    metrics = outdir / ("oracle_metrics.csv" if args.oracle else "metrics.csv")
    write_metrics(metrics, state.metrics)
    _write_run_metadata(outdir, cfg)
    last = state.metrics[-1] if state.metrics else {"loss": float("nan")}
    print(f"trained {state.pass_index}/{cfg.train.passes} passes, {state.step} steps; "
          f"final loss {last['loss']:.6f}; checkpoint {ckpt}; metrics {metrics}", file=out)
    return EXIT_OK


def estimate_rows(n, m, c, k=5, k2=10, map_size=15):
    model = ls.StorageModel(n, m, c, label_map_size=map_size)
    modes = [FULL, HARD, SMOOTH, marginal_renorm_mode(k), marginal_smooth_mode(k),
             marginal_smooth_mode(k2)]
    rows = [("relabel_full", "N*S^2*C", ls.estimate_relabel_storage(model)),
            ("relabel_top5", "N*S^2*2*5", ls.estimate_relabel_storage(model, topk=5))]
    for mode in modes:
        per = ls.values_per_crop(model, mode)
        rows.append((mode.name, f"N*M*{per}", ls.estimate_fkd_storage(model, mode)))
    return rows


def cmd_estimate(args, out):
    rows = estimate_rows(args.n, args.m, args.c, args.k, args.k2, args.map_size)
    if args.json:
        json.dump({name: size for name, _, size in rows}, out, indent=2)
        out.write("\n")
        return EXIT_OK
    print(f"N={args.n:g} M={args.m} C={args.c} K={args.k}/{args.k2} S_LM={args.map_size}",
          file=out)
    print(f"{'scheme':<24}{'values':>14}{'bytes':>18}  size", file=out)
    for name, formula, size in rows:
        print(f"{name:<24}{formula:>14}{size:>18}  {ls.format_bytes(size)}", file=out)
    return EXIT_OK


def _student_fn(path, num_classes):
    state, saved = load_checkpoint(path)
    tcfg = TrainConfig(**{k: v for k, v in saved.items()}) if saved else TrainConfig()

    def fn(regions):
        n_in = int(np.prod(regions.shape[1:]))
        return predict(state.theta, tcfg, n_in, num_classes, regions)
    return fn


def cmd_analyze(args, out):
    cfg = _config(args)
    acfg = cfg.analysis
    if len(acfg.sources) + len(acfg.students) < 2:
        raise UsageError("analysis needs at least two label sources")
    for _, path in acfg.students:
        if not Path(path).exists():
            raise FileNotFoundError(f"student checkpoint {path} not found")
    extra = [(name, _student_fn(path, acfg.scenario.num_classes)) for name, path in acfg.students]
    report, stats = run_mismatch_scenario(acfg.scenario, extra, include=acfg.sources)
    outdir = Path(cfg.paths.output)
    outdir.mkdir(parents=True, exist_ok=True)
    emit_report(report, outdir / "distance.csv")
    (outdir / "distance_summary.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    _write_run_metadata(outdir, cfg, "analysis_run.json")
    parts = [f"{k}={str(v).lower() if isinstance(v, bool) else v}" for k, v in sorted(stats.items())]
    print(" ".join(parts), file=out)
    return EXIT_OK


def bench_counts(store, batch_size, crops, batches=1):
    """Measured per-batch loads for each ``m`` in ``crops``, with wall-clock time."""
    rows = []
    for m in crops:
        per = batch_size // m
        if batch_size % m:
            raise ValueError(f"batch size {batch_size} not divisible by m={m}")
        if per > len(store):
            raise ValueError(f"m={m} needs {per} images, store has {len(store)}")
        for b in range(batches):
            ids = [(b * per + i) % len(store) for i in range(per)]
            t0 = time.perf_counter()
            batch = assemble_batch(store, BatchPlan(batch_size, m, ids, 0, [b, m]))
            rows.append({"m": m, "batch": b, "images_loaded": batch.cost.images_loaded,
                         "label_files_loaded": batch.cost.label_files_loaded,
                         "expected": loader_cost_model("fkd", batch_size, m).images_loaded,
                         "seconds": time.perf_counter() - t0})
    return rows


def cmd_bench(args, out):
    cfg = _config(args)
    store = DiskStore(cfg.paths.store)
    store.resolution = cfg.crop.resolution
    rows = bench_counts(store, cfg.bench.batch_size, cfg.bench.crops, cfg.bench.batches)
    print(f"# counts (B={cfg.bench.batch_size})", file=out)
    print("m,batch,images_loaded,label_files_loaded,expected", file=out)
    for r in rows:
        print(f"{r['m']},{r['batch']},{r['images_loaded']},{r['label_files_loaded']},"
              f"{r['expected']}", file=out)
    print("# timings (informational)", file=out)
    print("m,batch,seconds", file=out)
    for r in rows:
        print(f"{r['m']},{r['batch']},{r['seconds']:.6f}", file=out)
    return EXIT_OK


def cmd_inspect(args, out):
    data = Path(args.file).read_bytes()
    _, _, code, _, _, _ = ls.HEADER.unpack_from(data) if len(data) >= ls.HEADER_SIZE else (0,) * 6
    if code == ls.LABEL_MAP_CODE:
        grid = ls.decode_label_map(data)
        print(f"label map S={grid.shape[0]} C={grid.shape[2]}", file=out)
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                print(f"cell {i},{j} " + " ".join(f"{v:.6g}" for v in grid[i, j]), file=out)
        return EXIT_OK
    f = ls.decode(data)
    print(f"FKDL v{f.version} mode={f.mode.name} C={f.num_classes} K={f.k} M={len(f)}", file=out)
    for i, rec in enumerate(f.records):
        b = rec.aug.box
        idx = " ".join(str(v) for v in rec.label.indices)
        vals = " ".join(f"{v:.9g}" for v in rec.label.values)
        print(f"{i} box={b.x:.9g},{b.y:.9g},{b.w:.9g},{b.h:.9g} flip={int(rec.aug.flip)} "
              f"idx=[{idx}] val=[{vals}]", file=out)
    return EXIT_OK


# ------------------------------------------------------------------- main

def build_parser():
    p = _Parser(prog="fkd", description="Fast knowledge distillation label pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field, e.g. train.passes=3")
        return sp

    with_config(sub.add_parser("generate", help="pre-generate the label store"))
    t = with_config(sub.add_parser("train", help="train a student from the label store"))
    t.add_argument("--oracle", action="store_true", help="label crops with the teacher on the fly")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-after", type=int, help="stop after this many physical passes")
    e = sub.add_parser("estimate", help="storage table for a dataset size")
    e.add_argument("--n", type=float, default=1.2e6, help="number of images")
    e.add_argument("--m", type=int, default=200, help="crops per image")
    e.add_argument("--c", type=int, default=1000, help="number of classes")
    e.add_argument("--k", type=int, default=5)
    e.add_argument("--k2", type=int, default=10)
    e.add_argument("--map-size", type=int, default=15)
    e.add_argument("--json", action="store_true")
    with_config(sub.add_parser("analyze", help="cross-entropy distance report"))
    with_config(sub.add_parser("bench", help="loader cost for a sweep of crops per image"))
    i = sub.add_parser("inspect", help="dump a .fkdl file as text")
    i.add_argument("file")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "estimate": cmd_estimate,
            "analyze": cmd_analyze, "bench": cmd_bench, "inspect": cmd_inspect}


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "n", 0) is not None and args.command == "estimate":
        args.n = int(args.n)
        if args.n < 0:
            print("fkd: error: --n must be >= 0", file=sys.stderr)
            return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, out)
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"fkd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"fkd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
