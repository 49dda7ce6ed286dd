"""Command-line entry point: ``dbisl <subcommand> ...``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 I/O failure,
4 failed check.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import volio
from .config import RunConfig
from .errors import BadMagic, ConfigError, DbislError, TruncatedPayload, UnknownDtype

EXIT_CONFIG, EXIT_IO, EXIT_CHECK = 2, 3, 4
ROUNDTRIP_MODES = ("offline-original", "offline-resample", "online-original", "online-resample")
ROUNDTRIP_COLUMNS = ["case", "kind", "mode", "dsc", "seconds", "differentiable"]
BENCH_COLUMNS = ["size", "rate", "case", "mae", "spearman", "approx_seconds", "exact_seconds"]


class CheckFailed(Exception):
    pass


def _load_dataset(path, cfg):
    from .synth import Dataset
    if path is None:
        return Dataset(cfg.synth)
    return volio.StoredDataset(path)


# -- subcommands ---------------------------------------------------------------------
def cmd_gen(args, cfg):
    from .synth import Dataset
    data = Dataset(cfg.synth)
    out = Path(args.out)
    volio.save_dataset(out, data)
    (out / "config.json").write_text(cfg.resolved().dumps())
    print(f"wrote {len(data)} volumes to {out}")


def cmd_transform(args, cfg):
    from .dtrans import exact_edt, exact_signed, t_r2s, t_s2r
    from .tensor import Tensor, no_grad
    vol = volio.read_vol(args.input)
    data = vol.data
    with no_grad():
        if args.mode == "s2r":
            out = t_s2r(Tensor(data.astype(np.float32)), cfg.transform, rate=args.rate).data
        elif args.mode == "r2s":
            out = t_r2s(Tensor(data.astype(np.float32)), cfg.transform.sigmoid_steepness).data
        elif args.mode == "edt":
            out = exact_edt(data != 0)
        else:
            out = exact_signed(data != 0)
    dtype = np.float64 if args.mode in ("edt", "signed") else np.float32
    volio.write_vol(args.out, np.asarray(out, dtype=dtype), name=f"{args.mode}:{vol.name}",
                    spacing=vol.spacing)
    print(f"{args.mode}: wrote {args.out}")


def roundtrip_case(mask, mode, tcfg):
    """DSC of threshold(t_r2s(signed(mask))) against ``mask`` and elapsed seconds."""
    from .dtrans import exact_signed, resample, resample_back, t_r2s, t_s2r
    from .metrics import dice_precision_recall
    from .tensor import Tensor, no_grad
    m = np.asarray(mask, dtype=bool)
    start = time.perf_counter()
    with no_grad():
        if mode == "offline-original":
            sdm = exact_signed(m)
        elif mode == "offline-resample":
            small = resample(Tensor(m.astype(np.float32)), tcfg.down_rate).data >= 0.5
            sdm = resample_back(Tensor(exact_signed(small).astype(np.float32)), m.shape).data
        elif mode == "online-original":
            sdm = t_s2r(Tensor(m.astype(np.float32)), tcfg).data
        elif mode == "online-resample":
            sdm = t_s2r(Tensor(m.astype(np.float32)), tcfg, rate=tcfg.down_rate).data
        else:
            raise ConfigError(f"unknown roundtrip mode {mode!r}")
        back = t_r2s(Tensor(np.asarray(sdm, dtype=np.float32)), tcfg.sigmoid_steepness).data
    seconds = time.perf_counter() - start
    return dice_precision_recall(back >= 0.5, m)[0], seconds


def cmd_roundtrip(args, cfg):
    modes = _expand_modes(args.mode)
    data = _load_dataset(args.dataset, cfg)
    ids = range(len(data)) if args.cases is None else range(min(args.cases, len(data)))
    rows = []
    for i in ids:
        vol = data[i]
        for mode in modes:
            dsc, sec = roundtrip_case(vol.mask, mode, cfg.transform)
            rows.append({"case": i, "kind": vol.kind, "mode": mode, "dsc": dsc,
                         "seconds": sec, "differentiable": mode.startswith("online")})
    if args.report:
        volio.write_csv(args.report, rows, ROUNDTRIP_COLUMNS)
    summary = {}
    for mode in modes:
        vals = [r["dsc"] for r in rows if r["mode"] == mode]
        secs = [r["seconds"] for r in rows if r["mode"] == mode]
        summary[mode] = {"mean_dsc": float(np.mean(vals)), "mean_seconds": float(np.mean(secs))}
        print(f"{mode:18s} mean DSC {np.mean(vals):.4f}  mean time {np.mean(secs):.3f}s")
    return summary


def _expand_modes(given):
    if not given or "all" in given:
        return list(ROUNDTRIP_MODES)
    out = []
    for m in given:
        if m not in ROUNDTRIP_MODES:
            raise ConfigError(f"unknown roundtrip mode {m!r}; choose from {ROUNDTRIP_MODES}")
        out.append(m)
    return out


def cmd_gradcheck(args, cfg):
    from .checks import run_suites
    results = run_suites(tol=args.tol, seed=cfg.train.seed, max_coords=args.max_coords)
    failed = []
    for name, res, ok in results:
        print(f"{name:16s} {'PASS' if ok else 'FAIL'}  max_rel_err={res.max_rel_error:.3e}  "
              f"checked={res.checked} skipped_branch={res.skipped_branch} "
              f"skipped_floor={res.skipped_floor}")
        if not ok:
            failed.append(name)
    if failed:
        raise CheckFailed(f"gradient check failed for {failed}")


def cmd_train(args, cfg):
    from .engine import LOSS_COLUMNS, run_experiment
    cfg = cfg.resolved()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    data = _load_dataset(args.dataset, cfg)
    every = max(1, cfg.train.max_iterations // 10)
    with volio.CsvLog(out / "losses.csv", LOSS_COLUMNS) as log:
        def on_step(t, rep, opt):
            row = rep.row()
            row.update(iter=t, lr=opt.lr(t))
            log.append(row)
            if not args.quiet and (t % every == 0 or t == cfg.train.max_iterations - 1):
                print(f"iter {t:5d}  total {rep.total:.4f}")

        net, _, report = run_experiment(cfg.train, data, cfg.transform, cfg.loss, on_step)
    volio.save_checkpoint(out / "checkpoint", net.params,
                          extra={"iteration": report.iterations, "widths": list(net.widths)})
    volio.write_csv(out / "test_cases.csv", report.test_cases,
                    ["dice", "precision", "recall", "asd", "hd95"])
    # wall time lives apart so that reruns reproduce report.json byte for byte
    (out / "report.json").write_text(report.to_json(timing=False) + "\n")
    volio.write_json(out / "timing.json", {"wall_seconds": report.wall_seconds})
    print(f"test dice {report.test['dice']:.4f}  asd {report.test['asd']}  "
          f"hd95 {report.test['hd95']}")
    return report


def load_run_net(rundir):
    from .engine import make_net
    run = Path(rundir)
    cfg = RunConfig.load(run / "config.json")
    net = make_net(cfg.train)
    params, _ = volio.load_checkpoint(run / "checkpoint")
    if set(params) != set(net.params):
        raise BadMagic("checkpoint parameters do not match the configured network")
    for k, v in params.items():
        if v.shape != net.params[k].shape:
            raise BadMagic(f"checkpoint shape mismatch for {k}")
        net.params[k].data = v.astype(net.params[k].dtype)
    return cfg, net


def cmd_eval(args, cfg_unused):
    from .engine import evaluate
    from .metrics import summarize
    cfg, net = load_run_net(args.run)
    data = _load_dataset(args.dataset, cfg)
    cases, _ = evaluate(net, data, data.split.test, cfg.train)
    unl_cases, _ = evaluate(net, data, data.split.unlabeled, cfg.train)
    result = {"test": summarize(cases), "unlabeled": summarize(unl_cases),
              "test_cases": [c.to_dict() for c in cases]}
    run = Path(args.run)
    volio.write_json(run / "eval.json", result)
    volio.write_csv(run / "eval_cases.csv", result["test_cases"],
                    ["dice", "precision", "recall", "asd", "hd95"])
    print(f"test dice {result['test']['dice']:.4f}  unlabeled dice "
          f"{result['unlabeled']['dice']:.4f}")
    return result


def bench_case(mask, rate, tcfg):
    from scipy.stats import spearmanr
    from .dtrans import approx_dt, exact_edt, resample, resample_back
    from .tensor import Tensor, no_grad
    m = np.asarray(mask, dtype=bool)
    start = time.perf_counter()
    with no_grad():
        x = Tensor(m.astype(np.float32))
        if rate == 1:
            approx = approx_dt(x, tcfg).data
        else:
            small = resample(x, rate)
            approx = resample_back(approx_dt(small, tcfg, on_empty="zeros"), m.shape).data / rate
    t_approx = time.perf_counter() - start
    start = time.perf_counter()
    exact = exact_edt(m)
    t_exact = time.perf_counter() - start
    mae = float(np.abs(approx - exact).mean())
    rho = float(spearmanr(approx.ravel(), exact.ravel()).statistic)
    return mae, rho, t_approx, t_exact


def cmd_bench(args, cfg):
    rng = np.random.default_rng(cfg.train.seed)
    rows = []
    for size in args.sizes:
        for case in range(args.cases):
            g = np.indices((size,) * 3)
            m = np.zeros((size,) * 3, dtype=bool)
            for _ in range(3):
                c = rng.uniform(0.2 * size, 0.8 * size, size=3)
                rad = rng.uniform(0.08, 0.15) * size
                m |= ((g - c[:, None, None, None]) ** 2).sum(axis=0) <= rad * rad
            for rate in args.rates:
                mae, rho, ta, te = bench_case(m, rate, cfg.transform)
                rows.append({"size": size, "rate": rate, "case": case, "mae": mae,
                             "spearman": rho, "approx_seconds": ta, "exact_seconds": te})
                print(f"size {size:3d} rate {rate:<5} case {case}  mae {mae:.3f}  "
                      f"spearman {rho:.4f}  approx {ta:.3f}s exact {te:.4f}s")
    if args.report:
        volio.write_csv(args.report, rows, BENCH_COLUMNS)
    return rows


# -- parser ---------------------------------------------------------------------------
def _floats(text):
    return [float(v) for v in text.split(",") if v]


def _ints(text):
    return [int(v) for v in text.split(",") if v]


def build_parser():
    p = argparse.ArgumentParser(prog="dbisl", description=__doc__.splitlines()[0])
    p.add_argument("--json-errors", action="store_true",
                   help="print errors as a JSON object on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="run configuration JSON")
        return sp

    g = with_config(sub.add_parser("gen", help="generate the synthetic dataset"))
    g.add_argument("--out", required=True)

    t = with_config(sub.add_parser("transform", help="apply a transform to a stored volume"))
    t.add_argument("--in", dest="input", required=True)
    t.add_argument("--mode", choices=("s2r", "r2s", "edt", "signed"), required=True)
    t.add_argument("--rate", type=float, default=None, help="resample rate for s2r")
    t.add_argument("--out", required=True)

    r = with_config(sub.add_parser("roundtrip", help="segmentation -> signed map -> segmentation"))
    r.add_argument("--dataset", default=None, help="gen directory (default: from config)")
    r.add_argument("--mode", action="append", default=None,
                   help=f"one of {', '.join(ROUNDTRIP_MODES)} or 'all' (repeatable)")
    r.add_argument("--cases", type=int, default=None, help="limit to the first N volumes")
    r.add_argument("--report", default=None, help="CSV output path")

    c = with_config(sub.add_parser("gradcheck", help="finite-difference gradient suites"))
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--max-coords", type=int, default=120)

    tr = with_config(sub.add_parser("train", help="train and evaluate the final weights"))
    tr.add_argument("--out", required=True)
    tr.add_argument("--dataset", default=None)
    tr.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="sliding-window evaluation of a run's final checkpoint")
    e.add_argument("--run", required=True)
    e.add_argument("--dataset", default=None)

    b = with_config(sub.add_parser("bench", help="approximate vs exact distance transform"))
    b.add_argument("--sizes", type=_ints, default=[16, 32, 48])
    b.add_argument("--rates", type=_floats, default=[1.0, 0.5, 0.25])
    b.add_argument("--cases", type=int, default=2)
    b.add_argument("--report", default=None)
    return p


COMMANDS = {"gen": cmd_gen, "transform": cmd_transform, "roundtrip": cmd_roundtrip,
            "gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench}


def _fail(args, code, kind, msg):
    if getattr(args, "json_errors", False):
        print(json.dumps({"error": kind, "message": msg, "exit_code": code}), file=sys.stderr)
    else:
        print(f"error: {msg}", file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    try:
        cfg = RunConfig.load(getattr(args, "config", None))
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail(args, EXIT_CONFIG, "config-invalid", str(exc))
    except (OSError, BadMagic, TruncatedPayload, UnknownDtype) as exc:
        return _fail(args, EXIT_IO, "io-failure", str(exc))
    except CheckFailed as exc:
        return _fail(args, EXIT_CHECK, "check-failure", str(exc))
    except DbislError as exc:
        return _fail(args, 1, type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
