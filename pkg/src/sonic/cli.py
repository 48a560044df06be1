"""Single command-line entry point for generation, training, and verification.

Subcommands: gen, train, eval, gradcheck, verify, resample, export-spectrum,
bench.  Configuration precedence is defaults < JSON config file < explicit
flags.  Every artifact-producing run writes a manifest before starting and
finalizes it on completion; ``eval`` refuses checkpoints whose manifest hash
does not match the model file.  Exit codes: 0 success, 1 validation error,
2 verification failure.

``SONIC_THREADS`` caps the worker pool used for per-row robustness evaluation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import gradients as gr
from . import operator as op
from . import oracle
from . import tasks
from . import train as tr
from .errors import ConfigurationError, DiagnosticError, InvalidArgumentError
from .grid import build_frequency_grid


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def worker_cap() -> int:
    raw = os.environ.get("SONIC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _parse_int_pair(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise _UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_float_pair(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise _UsageError(f"expected comma-separated floats, got {text!r}") from exc


def build_parser() -> _Parser:
    parser = _Parser(prog="sonic", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def add_common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--size", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--config", type=str, default=None)

    p = sub.add_parser("gen", help="generate benchmark samples")
    add_common(p)
    p.add_argument("--task", choices=("synthshape", "halligalli"), default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--png", action="store_true", default=None)

    p = sub.add_parser("train", help="train a spectral network")
    add_common(p)
    p.add_argument("--task", choices=("synthshape", "halligalli"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--wd", type=float, default=None)
    p.add_argument("--modes", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)

    p = sub.add_parser("eval", help="robustness grid for a trained checkpoint")
    add_common(p)
    p.add_argument("--model", type=str, default=None)
    p.add_argument("--samples", type=int, default=None)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    add_common(p)
    p.add_argument("--modes", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)

    p = sub.add_parser("verify", help="run the brute-force oracle suite")
    add_common(p)

    p = sub.add_parser("resample", help="emit per-frequency symbol CSVs across grids")
    add_common(p)
    p.add_argument("--model", type=str, default=None)
    p.add_argument("--dims", action="append", type=_parse_int_pair, default=None)
    p.add_argument("--spacing", type=_parse_float_pair, default=None)

    p = sub.add_parser("export-spectrum", help="normalized spectral energy per stage")
    add_common(p)
    p.add_argument("--model", type=str, default=None)
    p.add_argument("--dims", action="append", type=_parse_int_pair, default=None)

    p = sub.add_parser("bench", help="block forward runtime across resolutions")
    add_common(p)
    p.add_argument("--dims", action="append", type=_parse_int_pair, default=None)
    p.add_argument("--modes", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--width", type=int, default=None)

    return parser


_DEFAULTS = {
    "gen": {"task": "synthshape", "seed": 0, "size": 32, "count": 16,
            "out": "out/gen", "png": False},
    "train": {"task": "synthshape", "seed": 0, "size": 32, "epochs": 200,
              "lr": 1e-2, "wd": 1e-4, "modes": 8, "channels": 3, "width": 16,
              "depth": 3, "out": "out/train"},
    "eval": {"model": None, "samples": 48, "seed": 0, "out": "out/eval"},
    "gradcheck": {"seed": 0, "size": 16, "modes": 2, "channels": 2, "width": 2,
                  "depth": 2},
    "verify": {"seed": 0},
    "resample": {"model": None, "dims": [(32, 32), (64, 64)],
                 "spacing": (1.0, 1.0), "out": "out/resample"},
    "export-spectrum": {"model": None, "dims": [(32, 32)], "out": "out/spectrum"},
    "bench": {"dims": [(32, 32), (64, 64), (128, 128)], "modes": 8, "channels": 8,
              "width": 8, "seed": 0, "out": None},
}


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    config = dict(_DEFAULTS[command])
    path = getattr(args, "config", None)
    if path:
        with open(path) as fh:
            loaded = json.load(fh)
        for key, value in loaded.items():
            if key in ("dims",):
                value = [tuple(v) for v in value]
            if key == "spacing":
                value = tuple(value)
            config[key] = value
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        config[key] = value
    return config


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in config.items()},
        "seed": config.get("seed"),
        "version": __version__,
        "outputs": {},
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "finished_at": None,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def finalize_manifest(path: Path, outputs: dict) -> None:
    manifest = json.loads(path.read_text())
    manifest["outputs"] = outputs
    manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _cmd_gen(config: dict) -> int:
    out_dir = Path(config["out"])
    manifest_path = write_manifest(out_dir, "gen", config)
    dataset = tasks.write_dataset(out_dir, config["task"], config["seed"],
                                  config["count"], config["size"],
                                  png=bool(config["png"]))
    finalize_manifest(manifest_path, {"dataset": "dataset.json",
                                      "count": dataset["count"]})
    print(f"wrote {dataset['count']} samples to {out_dir}")
    return 0


def _train_config(config: dict) -> tr.TrainConfig:
    return tr.TrainConfig(
        learning_rate=config["lr"], weight_decay=config["wd"],
        epochs=config["epochs"], seed=config["seed"],
        modes=config["modes"], width=config["width"], depth=config["depth"],
    )


def _cmd_train(config: dict) -> int:
    out_dir = Path(config["out"])
    manifest_path = write_manifest(out_dir, "train", config)
    task = tr.TaskSpec(config["task"], config["size"])
    cfg = _train_config(config)
    rng = np.random.default_rng(cfg.seed)
    net = op.build_network(rng, in_channels=config["channels"],
                           out_channels=task.num_classes, width=cfg.width,
                           depth=cfg.depth, n_modes=cfg.modes)
    best, records, state = tr.train(net, task, cfg, return_state=True)
    model_path = out_dir / "model.json"
    op.save_network(best, model_path)
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text(tr.metrics_csv(records, task))
    opt_path = out_dir / "optimizer.json"
    opt_path.write_text(json.dumps({
        "step": state.step,
        "m": {k: v.tolist() for k, v in state.m.items()},
        "v": {k: v.tolist() for k, v in state.v.items()},
    }) + "\n")
    finalize_manifest(manifest_path, {
        "model": model_path.name,
        "metrics": metrics_path.name,
        "optimizer": opt_path.name,
        "model_sha256": _sha256(model_path),
    })
    val = [r for r in records if r.split == "val"]
    if val:
        print(f"best validation score {max(r.score for r in val):.4f}")
    return 0


def _cmd_eval(config: dict) -> int:
    model_path = Path(config["model"]) if config["model"] else None
    if model_path is None or not model_path.exists():
        print("eval: --model is required and must exist", file=sys.stderr)
        return 1
    train_manifest = model_path.parent / "manifest.json"
    if not train_manifest.exists():
        print("eval: no manifest next to the model file", file=sys.stderr)
        return 1
    manifest = json.loads(train_manifest.read_text())
    recorded = manifest.get("outputs", {}).get("model_sha256")
    if recorded != _sha256(model_path):
        print("eval: model file hash does not match its manifest", file=sys.stderr)
        return 1
    net = op.load_network(model_path)
    task = tr.TaskSpec(manifest["config"]["task"], manifest["config"]["size"])
    out_dir = Path(config["out"])
    eval_manifest = write_manifest(out_dir, "eval", config)
    spec = tr.loss_spec_for(task, tr.TrainConfig(seed=config["seed"]))

    grid_rows = tr.perturbation_grid()
    base = config["seed"] * 10_000_000 + 2_000_000
    clean = [task.generate(base + j) for j in range(config["samples"])]

    def eval_row(row):
        kind, level = row
        if kind == "clean":
            samples = clean
        else:
            p = tasks.Perturbation(kind, level)
            samples = [tasks.apply_perturbation(s, p, seed=base + j)
                       for j, s in enumerate(clean)]
        return kind, level, tr.evaluate(net, samples, task, spec)

    cap = worker_cap()
    if cap > 1:
        with ThreadPoolExecutor(max_workers=cap) as pool:
            rows = list(pool.map(eval_row, grid_rows))
    else:
        rows = [eval_row(r) for r in grid_rows]
    csv_path = out_dir / "robustness.csv"
    csv_path.write_text(tr.robustness_csv(rows, task))
    finalize_manifest(eval_manifest, {"robustness": csv_path.name})
    print(csv_path)
    return 0


def _cmd_gradcheck(config: dict) -> int:
    rng = np.random.default_rng(config["seed"])
    net = op.build_network(rng, in_channels=config["channels"],
                           out_channels=tr.NUM_SYNTHSHAPE_CLASSES,
                           width=config["width"], depth=config["depth"],
                           n_modes=config["modes"])
    batch = [tasks.gen_synthshape(config["seed"] + j, config["size"])
             for j in range(2)]
    spec = gr.LossSpec(kind="segmentation")
    report = gr.gradient_check(net, batch, spec)
    sys.stdout.write(report.as_csv())
    print(f"max_rel_error,{report.max_rel_error:.6e}")
    return 0 if report.passed else 2


def _cmd_verify(config: dict) -> int:
    results = oracle.verify_all(seed=config["seed"])
    failed = 0
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'} {name} ({detail})")
        failed += 0 if passed else 1
    return 0 if failed == 0 else 2


def _format(value: float) -> str:
    return repr(float(value))


def _cmd_resample(config: dict) -> int:
    if not config["model"]:
        print("resample: --model is required", file=sys.stderr)
        return 1
    net = op.load_network(config["model"])
    block = net.blocks[0]
    out_dir = Path(config["out"])
    manifest_path = write_manifest(out_dir, "resample", config)
    outputs = {}
    for dims in config["dims"]:
        grid = build_frequency_grid(dims, config["spacing"])
        fields = op.mode_fields(block, grid)  # (M, F)
        symbol = np.einsum("km,mf,mc->kcf", block.mixing.Cmat, fields,
                           block.mixing.B, optimize=True)
        omega = np.stack([np.broadcast_to(a, grid.half_shape).reshape(-1)
                          for a in grid.omega_axes()])
        lines = []
        header = ["omega_" + str(d) for d in range(grid.ndim)]
        header += [f"mode{m}_{part}" for m in range(block.n_modes)
                   for part in ("re", "im")]
        header += [f"H_{k}_{c}_{part}" for k in range(block.out_channels)
                   for c in range(block.in_channels) for part in ("re", "im")]
        lines.append(",".join(header))
        for f in range(omega.shape[1]):
            row = [_format(omega[d, f]) for d in range(grid.ndim)]
            for m in range(block.n_modes):
                row += [_format(fields[m, f].real), _format(fields[m, f].imag)]
            for k in range(block.out_channels):
                for c in range(block.in_channels):
                    row += [_format(symbol[k, c, f].real), _format(symbol[k, c, f].imag)]
            lines.append(",".join(row))
        name = "resample_" + "x".join(str(n) for n in dims) + ".csv"
        (out_dir / name).write_text("\n".join(lines) + "\n")
        outputs[name] = name
    finalize_manifest(manifest_path, outputs)
    print(out_dir)
    return 0


def _cmd_export_spectrum(config: dict) -> int:
    if not config["model"]:
        print("export-spectrum: --model is required", file=sys.stderr)
        return 1
    net = op.load_network(config["model"])
    out_dir = Path(config["out"])
    manifest_path = write_manifest(out_dir, "export-spectrum", config)
    dims = config["dims"][0]
    outputs = {}
    for i, block in enumerate(net.blocks):
        grid = build_frequency_grid(dims, (1.0,) * len(dims))
        symbol = op.assemble_symbol(block, grid)
        energy = np.mean(np.abs(symbol.values) ** 2, axis=(0, 1))  # half grid
        peak = max(float(energy.max()), 1e-30)
        norm = energy / peak
        omega = np.stack([np.broadcast_to(a, grid.half_shape).reshape(-1)
                          for a in grid.omega_axes()])
        lines = [",".join([f"omega_{d}" for d in range(grid.ndim)] + ["energy"])]
        flat = norm.reshape(-1)
        for f in range(flat.size):
            lines.append(",".join([_format(omega[d, f]) for d in range(grid.ndim)]
                                  + [_format(flat[f])]))
        csv_name = f"stage{i}_energy.csv"
        (out_dir / csv_name).write_text("\n".join(lines) + "\n")

        # Full-grid view for inspection: reflect, shift, log-scale to 8 bits.
        from .grid import hermitian_extend

        full = np.abs(hermitian_extend(np.sqrt(energy, dtype=complex), dims)) ** 2
        shifted = np.fft.fftshift(full)
        img = np.log10(shifted / peak + 1e-12)
        img = (img - img.min()) / max(img.max() - img.min(), 1e-30)
        pgm_name = f"stage{i}_energy.pgm"
        with open(out_dir / pgm_name, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (shifted.shape[1], shifted.shape[0]))
            fh.write((img * 255).astype(np.uint8).tobytes())
        outputs[csv_name] = csv_name
        outputs[pgm_name] = pgm_name
    finalize_manifest(manifest_path, outputs)
    print(out_dir)
    return 0


def _cmd_bench(config: dict) -> int:
    rng = np.random.default_rng(config["seed"])
    lines = ["height,width,n,median_ms"]
    for dims in config["dims"]:
        grid = build_frequency_grid(dims, (1.0,) * len(dims))
        block = op.random_block(rng, config["modes"], config["channels"],
                                config["width"], len(dims))
        from .grid import Signal

        x = Signal(rng.standard_normal((config["channels"],) + tuple(dims)), grid)
        for _ in range(3):
            op.block_forward(block, x)
        times = []
        for _ in range(20):
            start = time.perf_counter()
            op.block_forward(block, x)
            times.append((time.perf_counter() - start) * 1e3)
        med = float(np.median(times))
        lines.append(f"{dims[0]},{dims[1]},{int(np.prod(dims))},{med:.6f}")
    csv = "\n".join(lines) + "\n"
    if config["out"]:
        out_dir = Path(config["out"])
        manifest_path = write_manifest(out_dir, "bench", config)
        (out_dir / "bench.csv").write_text(csv)
        finalize_manifest(manifest_path, {"bench": "bench.csv"})
        print(out_dir / "bench.csv")
    else:
        sys.stdout.write(csv)
    return 0


_HANDLERS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "verify": _cmd_verify,
    "resample": _cmd_resample,
    "export-spectrum": _cmd_export_spectrum,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        config = resolve_config(args.command, args)
        return _HANDLERS[args.command](config)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InvalidArgumentError, ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DiagnosticError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
