"""Command-line entry point: ``mmboot <command> ...``.

Every command writes its results to ``--out-dir`` together with a
``<command>.manifest.json`` recording the arguments, configuration, input and
output digests and wall-clock time. Result files carry no timings, so they
are byte-identical across reruns with the same inputs and seed.

Exit codes: 0 success, 1 bad input, 2 numerical failure or non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .analysis import SingularCovarianceError, proportions, select_K, two_sample_test
from .bootstrap import ResampleScheme, bootstrap_run, percentile_ci
from .inference import FitConfig, _sandwich_from_patterns, fit, multi_start_fit
from .model import (DataFormatError, Dataset, FitResult, ModelParams,
                    parameter_names, read_csv, read_params, sample_dataset, write_csv)
from .oracle import coverage_experiment

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class InputError(Exception):
    pass


class NumericError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    tool_version: str = __version__
    wall_clock_seconds: float = 0.0
    schema_version: int = 1

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        self.outputs[Path(path).name] = sha256_file(path)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"{self.command}.manifest.json"
        path.write_text(json.dumps(vars(self), indent=2, sort_keys=True) + "\n")
        return path


def _dump(obj: dict, path: Path, manifest: RunManifest) -> None:
    obj = {**obj, "manifest": f"{manifest.command}.manifest.json"}
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")
    manifest.add_output(path)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _fmt(v) -> str:
    v = float(v)
    return repr(v) if np.isfinite(v) else ("" if np.isnan(v) else repr(v))


def _write_table(path: Path, header, rows, manifest: RunManifest) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(c) if isinstance(c, (float, np.floating)) else c for c in r])
    manifest.add_output(path)


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{p}: invalid JSON ({e})") from None


def _load_data(path, manifest: RunManifest) -> Dataset:
    data = read_csv(path)
    manifest.add_input(path)
    return data


def _load_fit(path, data: Dataset, manifest: RunManifest) -> ModelParams:
    obj = _read_json(path)
    manifest.add_input(path)
    try:
        theta = ModelParams.from_json(obj["theta"])
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"{path}: not a fit result ({e})") from None
    if theta.J != data.J:
        raise InputError(f"{path}: fit has {theta.J} items but the data have {data.J}")
    return theta


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(args, cfg: FitConfig, manifest: RunManifest, out: Path) -> int:
    data = _load_data(args.data, manifest)
    if args.K < 1:
        raise InputError("K must be at least 1")
    if args.init:
        init = read_params(args.init)
        manifest.add_input(args.init)
        if init.K != args.K or init.J != data.J:
            raise InputError("initial parameters do not match K and the data")
        fr = fit(data, args.K, init=init, cfg=cfg)
    else:
        fr = multi_start_fit(data, args.K, args.starts, args.seed, cfg, args.workers)
    obj = fr.to_json()
    obj.pop("omega", None)
    obj["item_labels"] = list(data.item_labels)
    obj["n"] = data.n
    obj["parameter_names"] = parameter_names(args.K, data.item_labels)
    _dump(obj, out / "fit.json", manifest)
    if not fr.converged:
        print("fit did not converge", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _refit_at(data: Dataset, theta: ModelParams, cfg: FitConfig) -> FitResult:
    """Re-run the fit from the stored estimate to recover the variational
    parameters the bootstrap warm-starts from."""
    fr = fit(data, theta.K, init=theta, cfg=cfg)
    if not fr.converged:
        raise NumericError("could not reconverge the stored fit on these data")
    return fr


def cmd_bootstrap(args, cfg: FitConfig, manifest: RunManifest, out: Path) -> int:
    data = _load_data(args.data, manifest)
    theta = _load_fit(args.fit, data, manifest)
    if args.B < 2:
        raise InputError("B must be at least 2")
    if not 0 < args.alpha < 1:
        raise InputError("--alpha must lie in (0, 1)")
    fr = _refit_at(data, theta, cfg)
    K = theta.K
    sigma_hat = None
    notes = []
    studentize = not args.no_pivotal
    if studentize:
        X, w, _ = data.patterns
        first = np.zeros(X.shape[0], dtype=np.int64)
        first[data.patterns[2][::-1]] = np.arange(data.n)[::-1]
        sw = _sandwich_from_patterns(fr.theta, X, w, cfg, fr.omega.phi[first])
        if sw.available:
            sigma_hat = sw.se_natural
        else:
            studentize = False
            notes.append(sw.message)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        summ = bootstrap_run(data, K, fr, ResampleScheme(args.scheme), args.B, args.seed, cfg,
                             alpha_level=args.alpha, workers=args.workers,
                             studentize=studentize, sigma_hat=sigma_hat,
                             orientation=args.orientation)
    notes.extend(str(c.message) for c in caught)
    obj = summ.to_json()
    obj["notes"] = list(obj["notes"]) + notes
    _dump(obj, out / "bootstrap.json", manifest)
    est = fr.theta.to_vector()
    se = np.sqrt(summ.variance)
    piv = summ.pivotal_ci if summ.pivotal_ci is not None else np.full((est.size, 2), np.nan)
    rows = [(name, est[l], se[l], *summ.percentile_ci[l], *piv[l])
            for l, name in enumerate(summ.names)]
    props = summ.proportions()
    p_hat = fr.theta.proportions()
    if props.shape[0] >= 2:
        p_se = np.sqrt(((props - props.mean(axis=0)) ** 2).mean(axis=0))
        p_ci = percentile_ci(props, p_hat, args.alpha, args.orientation)
    else:
        p_se = np.full(K, np.nan)
        p_ci = np.full((K, 2), np.nan)
    rows += [(f"prop_{k + 1}", p_hat[k], p_se[k], *p_ci[k], np.nan, np.nan) for k in range(K)]
    _write_table(out / "ci.csv", ["param", "estimate", "se_boot", "lo_pct", "hi_pct",
                                  "lo_piv", "hi_piv"], rows, manifest)
    summ.write_replicates_csv(out / "replicates.csv")
    manifest.add_output(out / "replicates.csv")
    if summ.unreliable:
        print(f"warning: {summ.failures} of {summ.B} replicates failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_select_k(args, cfg: FitConfig, manifest: RunManifest, out: Path) -> int:
    data = _load_data(args.data, manifest)
    if args.kmin < 1 or args.kmax < args.kmin:
        raise InputError("need 1 <= kmin <= kmax")
    res = select_K(data, range(args.kmin, args.kmax + 1), args.starts, args.seed, cfg,
                   args.workers)
    _dump(res.to_json(), out / "select_k.json", manifest)
    _write_table(out / "pbic.csv", ["K", "n_params", "elbo", "pbic", "n_distinct_modes"],
                 [(r.K, r.n_params, r.elbo, r.pbic, r.n_distinct_modes) for r in res.per_K],
                 manifest)
    if not all(r.converged for r in res.per_K):
        print("some fits did not converge", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_two_sample(args, cfg: FitConfig, manifest: RunManifest, out: Path) -> int:
    data_a = _load_data(args.data_a, manifest)
    data_b = _load_data(args.data_b, manifest)
    if data_a.J != data_b.J:
        raise InputError("the two samples have different numbers of items")
    theta = _load_fit(args.pi_from, data_a, manifest)
    if theta.K < 2:
        raise InputError("the two-sample test needs a fit with K >= 2")
    res = two_sample_test(data_a, data_b, theta.pi, args.B, args.seed, cfg, args.starts,
                          ResampleScheme(args.scheme), args.drop, args.workers)
    _dump(res.to_json(), out / "two_sample.json", manifest)
    rows = []
    for label, alpha, reps in (("a", res.alpha_hat_a, res.replicates_a),
                               ("b", res.alpha_hat_b, res.replicates_b)):
        p = proportions(alpha)
        ci = percentile_ci(reps, p, args.alpha)
        rows += [(label, k + 1, p[k], *ci[k]) for k in range(p.size)]
    _write_table(out / "proportions.csv", ["sample", "group", "proportion", "lo_pct", "hi_pct"],
                 rows, manifest)
    return EXIT_OK


def demo_params() -> ModelParams:
    """A 16-item, 4-group parameter set for demonstrations."""
    rng = np.random.default_rng(16)
    base = np.array([0.08, 0.9, 0.45, 0.25])
    pi = np.clip(base[None, :] + rng.uniform(-0.07, 0.07, (16, 4)), 0.02, 0.98)
    return ModelParams(np.array([0.4, 0.3, 0.2, 0.15]), pi)


def cmd_simulate(args, cfg: FitConfig, manifest: RunManifest, out: Path) -> int:
    if args.n < 1:
        raise InputError("n must be at least 1")
    if args.theta:
        theta = read_params(args.theta)
        manifest.add_input(args.theta)
    else:
        theta = demo_params()
    data, latent = sample_dataset(theta, args.n, args.seed)
    path = out / args.out
    write_csv(data, path)
    manifest.add_output(path)
    sidecar = {"schema_version": 1, "theta": theta.to_json(), "seed": args.seed,
               "membership": latent.membership, "groups": latent.groups}
    _dump(sidecar, out / (Path(args.out).stem + ".latent.json"), manifest)
    return EXIT_OK


def cmd_coverage(args, cfg: FitConfig, manifest: RunManifest, out: Path) -> int:
    if not args.config:
        raise InputError("coverage needs --config with a 'coverage' section")
    section = _read_json(args.config).get("coverage")
    if not isinstance(section, dict) or "theta0" not in section:
        raise InputError("--config must contain coverage.theta0")
    try:
        theta0 = ModelParams.from_json(section["theta0"])
        target = ModelParams.from_json(section["target"]) if section.get("target") else None
        rep = coverage_experiment(theta0, int(section.get("n", 100)), int(section.get("B", 50)),
                                  int(section.get("M", 20)),
                                  ResampleScheme(section.get("scheme", "nonparametric")),
                                  float(section.get("level", 0.95)), args.seed, cfg, args.workers,
                                  target, bool(section.get("pivotal", False)),
                                  section.get("bootstrap_reps"))
    except (KeyError, TypeError) as e:
        raise InputError(f"bad coverage configuration: {e}") from None
    _dump(rep.to_json(), out / "coverage.json", manifest)
    rep.write_rows_csv(out / "coverage_reps.csv")
    manifest.add_output(out / "coverage_reps.csv")
    if rep.flagged:
        print(f"warning: {rep.failures} of {rep.M} repetitions failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "bootstrap": cmd_bootstrap,
    "select-k": cmd_select_k,
    "two-sample": cmd_two_sample,
    "simulate": cmd_simulate,
    "coverage": cmd_coverage,
}


def _global_options(defaults: bool) -> argparse.ArgumentParser:
    # the subcommand copies suppress their defaults so that a value given
    # before the subcommand name is not overwritten
    def d(v):
        return v if defaults else argparse.SUPPRESS
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=d(0))
    g.add_argument("--config", default=d(None),
                   help="JSON file; its 'fit' section sets FitConfig")
    g.add_argument("--workers", type=int, default=d(1))
    g.add_argument("--out-dir", default=d("."))
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_options(False)
    p = argparse.ArgumentParser(prog="mmboot", parents=[_global_options(True)],
                                description="Variational fits and bootstrap inference for "
                                            "mixed membership models of binary responses.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit", parents=[common], help="fit the model to a 0/1 CSV")
    s.add_argument("data")
    s.add_argument("-K", type=int, required=True)
    s.add_argument("--starts", type=int, default=20)
    s.add_argument("--init", help="starting parameters (JSON); skips the multi-start search")

    s = sub.add_parser("bootstrap", parents=[common], help="bootstrap intervals for a fit")
    s.add_argument("data")
    s.add_argument("--fit", required=True)
    s.add_argument("--B", type=int, default=200)
    s.add_argument("--scheme", choices=["np", "weighted", "param"], default="np")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--orientation", choices=["displayed", "basic"], default="displayed")
    s.add_argument("--no-pivotal", action="store_true",
                   help="skip per-replicate sandwich standard errors")

    s = sub.add_parser("select-k", parents=[common], help="choose K by pseudo-BIC")
    s.add_argument("data")
    s.add_argument("--kmin", type=int, default=1)
    s.add_argument("--kmax", type=int, default=4)
    s.add_argument("--starts", type=int, default=20)

    s = sub.add_parser("two-sample", parents=[common], help="Wald test for equal proportions")
    s.add_argument("--data-a", required=True)
    s.add_argument("--data-b", required=True)
    s.add_argument("--pi-from", required=True, help="fit.json whose pi is held fixed")
    s.add_argument("--B", type=int, default=300)
    s.add_argument("--starts", type=int, default=20)
    s.add_argument("--scheme", choices=["np", "weighted"], default="np")
    s.add_argument("--drop", type=int, default=None, help="group left out (default: last)")
    s.add_argument("--alpha", type=float, default=0.05)

    s = sub.add_parser("simulate", parents=[common], help="draw a dataset from parameters")
    s.add_argument("--theta", help="parameter JSON; default is the bundled 16-item demo")
    s.add_argument("-n", type=int, required=True)
    s.add_argument("--out", default="data.csv")

    sub.add_parser("coverage", parents=[common], help="Monte Carlo coverage experiment")
    return p


def main(argv: Optional[list] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    t0 = time.perf_counter()
    try:
        cfg = FitConfig.load(args.config) if args.config else FitConfig()
        if args.workers < 1:
            raise InputError("--workers must be at least 1")
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, argv, cfg.to_json(), args.seed)
        if args.config:
            manifest.add_input(args.config)
        code = COMMANDS[args.command](args, cfg, manifest, out)
    except (FileNotFoundError, DataFormatError, InputError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, SingularCovarianceError, ArithmeticError, RuntimeError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    manifest.wall_clock_seconds = round(time.perf_counter() - t0, 3)
    manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
