"""Command-line entry point: ``ndssm {kernel,train,zeroshot,bench,render-data}``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .conv import profile_conv
from .datagen import ArrayDataset, SyntheticDataset
from .errors import ConfigError, DomainError, NumericalError
from .io import (MetricsWriter, load_checkpoint, read_container, save_checkpoint, write_container,
                 write_pgm)
from .kernel import FactoredKernelSpec, assemble_factored, make_factored_spec
from .model import IsotropicModel, evaluate_zero_shot, load_best, train, train_progressive
from .resolution import ResolutionPlan, StageError, rescale_delta
from .ssm import DiagonalSSM

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CHECKPOINT = 0, 2, 3, 4

BENCH_PRESETS = {
    "paper-fig9": {"input_shape": (64, 224, 224), "kernel_shape": (447, 447)},
    "small": {"input_shape": (8, 32, 32), "kernel_shape": (63, 63)},
}
PAPER_FFT_SHARE = (0.65, 0.80)

log = logging.getLogger("ndssm")


class MissingCheckpoint(Exception):
    pass


def _res_name(res) -> str:
    return "x".join(str(int(r)) for r in res)


def _parse_res(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use e.g. 32x32") from None


def _load(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, precision=args.precision)


def _dataset(cfg: cfgmod.ExperimentConfig):
    if cfg.data_files:
        tr, _ = read_container(cfg.data_files["train"])
        va, _ = read_container(cfg.data_files["val"])
        return ArrayDataset(tr["x"], tr["y"].astype(np.int64), va["x"], va["y"].astype(np.int64),
                            n_classes=cfg.model.n_classes)
    return SyntheticDataset(cfg.data)


# ------------------------------------------------------------------ commands
def _kernel_spec(kc: cfgmod.KernelConfig) -> FactoredKernelSpec:
    lengths = kc.resolutions[0]
    if len(lengths) != kc.dims:
        raise ConfigError(f"kernel resolution {lengths} does not have {kc.dims} axes")
    if kc.explicit is None:
        return make_factored_spec(kc.dims, kc.state_size, lengths, rank=kc.rank, kind=kc.init,
                                  deltas=kc.delta, seed=kc.seed, bidirectional=kc.bidirectional,
                                  method=kc.method)
    a, b, c = (np.array([complex(*v) for v in kc.explicit[k]]) for k in ("a", "b", "c"))
    try:
        base = DiagonalSSM(a=a, b=b, c=c, delta=kc.delta, init_kind=kc.init, bidirectional=kc.bidirectional)
    except DomainError as exc:
        raise ConfigError(f"kernel.explicit: {exc}") from None
    coeffs = tuple(c[None] for _ in range(kc.dims))
    return FactoredKernelSpec(bases=(base,) * kc.dims, coeffs=coeffs, lengths=tuple(lengths),
                              method=kc.method, coeffs_backward=coeffs if kc.bidirectional else None)


def cmd_kernel(cfg, out: Path) -> dict:
    kc = cfg.kernel
    spec = _kernel_spec(kc)
    tensors, files = {}, []
    for res in kc.resolutions:
        k = assemble_factored(rescale_delta(spec, ResolutionPlan(spec.lengths, res)), cfg.alpha).data
        name = f"kernel_{_res_name(res)}"
        tensors[name] = k
        img = k.reshape(1, -1) if k.ndim == 1 else k[(k.shape[0] // 2,) * (k.ndim - 2)]
        files.append(str(write_pgm(out / f"{name}.pgm", img)))
    meta = {"alpha": None if math.isinf(cfg.alpha) else cfg.alpha,
            "resolutions": [list(r) for r in kc.resolutions], "config": cfgmod.to_dict(cfg)["kernel"]}
    path = write_container(out / "kernels.ndssm", tensors, meta, precision=cfg.precision)
    return {"container": str(path), "images": files}


def cmd_train(cfg, out: Path) -> dict:
    model = IsotropicModel(cfg.model_config)
    tcfg = cfg.train_config
    dataset = _dataset(cfg)
    res = model.resolution
    evals = [res] + [tuple(r) for r in cfg.zero_shot if tuple(r) != res]
    cfg_doc = cfgmod.to_dict(cfg)
    metrics_path = out / "metrics.ndjson"
    out.mkdir(parents=True, exist_ok=True)
    metrics_path.write_text("")
    history = []
    with MetricsWriter(metrics_path) as sink:
        if tcfg.epochs == 0 and cfg.schedule is None:
            record = None
        elif cfg.schedule is not None:
            record = train_progressive(model, dataset, tcfg, cfg.schedule, evals, sink)
            history = [{"stage": i, "resolution": list(s.resolution), "epochs": s.epochs,
                        "alpha": None if math.isinf(s.alpha) else s.alpha}
                       for i, s in enumerate(cfg.schedule.stages)]
            evals = [model.resolution] + [r for r in evals if r != model.resolution]
        else:
            record = train(model, dataset, tcfg, evals, sink)
    written = {"final": str(save_checkpoint(out / "checkpoint_final.ndssm", model, cfg_doc, history,
                                            precision=cfg.precision))}
    if record is not None:
        for r, best in record.best.items():
            m = load_best(model, record, r)
            m.alpha = model.alpha
            written[_res_name(r)] = str(save_checkpoint(out / f"best_{_res_name(r)}.ndssm", m, cfg_doc,
                                                       history + [{"best_epoch": best["epoch"],
                                                                   "accuracy": best["accuracy"]}],
                                                       precision=cfg.precision))
    return {"metrics": str(metrics_path), "checkpoints": written}


def cmd_zeroshot(cfg, out: Path, checkpoints, resolutions) -> dict:
    dataset = _dataset(cfg)
    rows = []
    for path in checkpoints:
        if not Path(path).is_file():
            raise MissingCheckpoint(path)
        model, meta = load_checkpoint(path)
        results = []
        for r in resolutions or [model.resolution]:
            acc, loss = evaluate_zero_shot(model, dataset, r)
            results.append({"resolution": list(r), "accuracy": acc, "loss": loss})
        rows.append({"checkpoint": str(path), "model": model.config.kind,
                     "trained_resolution": list(model.resolution),
                     "alpha": meta.get("alpha"), "params": model.n_params(), "results": results})
    table = {"rows": rows}
    out.mkdir(parents=True, exist_ok=True)
    (out / "zeroshot.json").write_text(json.dumps(table, indent=2) + "\n")
    return table


def bench_report(input_shape, kernel_shape, repetitions: int, preset: str | None = None) -> dict:
    rep = profile_conv(input_shape, kernel_shape, repetitions).to_dict()
    rep["preset"] = preset
    lo, hi = PAPER_FFT_SHARE
    share = rep["fft_pipeline_share"]
    rep["paper_comparison"] = {"paper_fft_share_range": [lo, hi], "measured_fft_share": share,
                               "within_paper_range": bool(lo <= share <= hi)}
    return rep


def cmd_bench(cfg, out: Path) -> dict:
    b = cfg.bench
    if b.preset is not None and not b.input_shape:
        shapes = BENCH_PRESETS[b.preset]
        input_shape, kernel_shape = shapes["input_shape"], shapes["kernel_shape"]
    else:
        if not b.input_shape or not b.kernel_shape:
            raise ConfigError("bench needs a preset or both input_shape and kernel_shape")
        input_shape, kernel_shape = tuple(b.input_shape), tuple(b.kernel_shape)
    rep = bench_report(input_shape, kernel_shape, b.repetitions, b.preset)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(rep, indent=2) + "\n")
    return rep


def cmd_render_data(cfg, out: Path, resolutions) -> dict:
    ds = SyntheticDataset(cfg.data)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenes.json").write_text(ds.to_json())
    written = []
    for r in resolutions or [cfg.model.resolution]:
        for split in ("train", "val"):
            x, y = ds.arrays(split, r)
            if len(y) == 0:
                continue
            path = out / f"{split}_{_res_name(r)}.ndssm"
            write_container(path, {"x": x, "y": y.astype(np.float64)},
                            {"split": split, "resolution": list(r), "manifest": cfg.data.to_dict()},
                            precision=cfg.precision)
            written.append(str(path))
    return {"files": written}


# ---------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON path or preset:NAME)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"), help="storage and data precision")
    p = argparse.ArgumentParser(prog="ndssm", description="Resolution-independent N-D SSM convolutions.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("kernel", parents=[common], help="assemble kernels and write container + PGM images")
    sub.add_parser("train", parents=[common], help="train a model, write metrics and checkpoints")
    z = sub.add_parser("zeroshot", parents=[common], help="evaluate checkpoints at other resolutions")
    z.add_argument("--checkpoint", action="append", required=True, type=Path)
    z.add_argument("--resolutions", nargs="+", type=_parse_res, default=[])
    b = sub.add_parser("bench", parents=[common], help="time the stages of an FFT convolution")
    b.add_argument("--preset", choices=sorted(BENCH_PRESETS))
    b.add_argument("--input-shape", nargs="+", type=int)
    b.add_argument("--kernel-shape", nargs="+", type=int)
    b.add_argument("--repetitions", type=int)
    r = sub.add_parser("render-data", parents=[common], help="render the synthetic dataset to containers")
    r.add_argument("--resolutions", nargs="+", type=_parse_res, default=[])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except StageError as exc:
        cause = exc.__cause__
        code = EXIT_NUMERICAL if isinstance(cause, NumericalError) else EXIT_CONFIG
        print(f"{exc}", file=sys.stderr)
        return code


def _run(args) -> int:
    try:
        cfg = _load(args)
        out = args.out
        if args.command == "kernel":
            result = cmd_kernel(cfg, out)
        elif args.command == "train":
            result = cmd_train(cfg, out)
        elif args.command == "zeroshot":
            result = cmd_zeroshot(cfg, out, args.checkpoint, args.resolutions)
        elif args.command == "bench":
            b = cfg.bench
            overrides = {k: v for k, v in (("preset", args.preset), ("repetitions", args.repetitions),
                                           ("input_shape", args.input_shape),
                                           ("kernel_shape", args.kernel_shape)) if v is not None}
            if args.input_shape is not None and args.preset is None:
                overrides["preset"] = None
            cfg = replace(cfg, bench=replace(b, **overrides))
            result = cmd_bench(cfg, out)
        else:
            result = cmd_render_data(cfg, out, args.resolutions)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MissingCheckpoint as exc:
        print(f"checkpoint not found: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
