"""Command-line interface: ``multid2 run | sweep | resume | spectrum``.

Every run writes into its output directory

    config.json          resolved configuration
    manifest.json        config copy, code version, wall time, status
    modes.csv            discretized bath (j, omega, lambda)
    trajectory.npz       raw output (times, A, F, n_groups)
    population.csv       (t, P_z) for spin-boson runs
    density.csv          (t, n, rho_nn) for Holstein runs
    conservation.csv     (t, norm, energy)
    events.jsonl         one apoptosis event per line
    diagnostics.ndjson   one record per accepted step
    checkpoint.json      latest state plus configuration
    abort.json           only for aborted runs (exit status 3)
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, config, observables, propagator
from .ensemble import EnsembleState
from .errors import ConfigurationError, Multid2Error, PropagationAborted

log = logging.getLogger("multid2")

WORKERS_ENV = "MULTID2_WORKERS"
EXIT_CONFIG = 2
EXIT_ABORTED = 3


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


class RunRecorder:
    """Streams events and diagnostics to disk while a run progresses."""

    def __init__(self, outdir, cfg):
        self.outdir = Path(outdir)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self._diag = open(self.outdir / "diagnostics.ndjson", "a", encoding="utf-8", newline="\n")

    def diagnostics(self, rec):
        self._diag.write(json.dumps({k: _jsonable(v) for k, v in rec.items()}) + "\n")

    def checkpoint(self, state):
        data = {"config": self.cfg, "state": state.to_dict()}
        tmp = self.outdir / "checkpoint.json.tmp"
        _write_json(tmp, data)
        os.replace(tmp, self.outdir / "checkpoint.json")

    def events(self, events):
        # the partition carries the full history, including resumed segments
        with open(self.outdir / "events.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for ev in events:
                fh.write(json.dumps(ev.to_dict()) + "\n")

    def close(self):
        self._diag.close()


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def _merge_previous(outdir, out):
    """Prepend trajectory points of an earlier (interrupted) run segment."""
    path = Path(outdir) / "trajectory.npz"
    if not path.exists() or len(out.times) == 0:
        return out
    prev = np.load(path)
    keep = prev["times"] < out.times[0] - 1e-12 * max(1.0, abs(out.times[0]))
    if not keep.any() or prev["A"].shape[1:] != out.A.shape[1:] or prev["F"].shape[1:] != out.F.shape[1:]:
        return out
    out.times = np.concatenate([prev["times"][keep], out.times])
    out.A = np.concatenate([prev["A"][keep], out.A])
    out.F = np.concatenate([prev["F"][keep], out.F])
    out.n_groups = np.concatenate([prev["n_groups"][keep], out.n_groups])
    return out


def write_outputs(outdir, out, model):
    outdir = Path(outdir)
    np.savez_compressed(outdir / "trajectory.npz", times=out.times, A=out.A, F=out.F,
                        n_groups=out.n_groups)
    if len(out.times) == 0:
        return
    if model.kind == "spin_boson":
        observables.write_population_csv(outdir / "population.csv", out.times,
                                         observables.population_z_series(out.A, out.F))
    else:
        observables.write_density_csv(outdir / "density.csv", out.times,
                                      observables.site_populations_series(out.A, out.F))
    norms = observables.norm_series(out.A, out.F)
    energies = observables.energy_series(out.A, out.F, model)
    with open(outdir / "conservation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "norm", "energy"])
        for row in zip(out.times, norms, energies):
            w.writerow([repr(float(v)) for v in row])


def execute(cfg, outdir=None, state=None, t_grid0=0.0):
    """Run one configuration; returns ``(RunOutput, exit status)``."""
    cfg = config.resolved(cfg)
    outdir = Path(outdir or cfg["output"]["directory"])
    outdir.mkdir(parents=True, exist_ok=True)
    model = config.build_model(cfg)
    if state is None:
        state = config.build_initial_state(cfg, model)
        for name in ("events.jsonl", "diagnostics.ndjson", "abort.json", "trajectory.npz"):
            (outdir / name).unlink(missing_ok=True)
    integ, policy, options = config.build_run_objects(cfg)
    _write_json(outdir / "config.json", cfg)
    model.write_mode_table(outdir / "modes.csv")
    rec = RunRecorder(outdir, cfg)
    started = time.time()
    status, abort_info = "completed", None
    try:
        out = propagator.run(state, model, integ, policy, options, checkpoint=rec.checkpoint,
                             checkpoint_period=cfg["output"]["checkpoint_period"],
                             diagnostics=rec.diagnostics, t_grid0=t_grid0)
    except PropagationAborted as exc:
        out = exc.output
        status, abort_info = "aborted", {k: _jsonable(v) for k, v in exc.diagnostics.items()}
        rec.checkpoint(out.final_state)
        _write_json(outdir / "abort.json", abort_info)
        log.error("run aborted: %s", exc)
    finally:
        rec.close()
    rec.events(out.events)
    out = _merge_previous(outdir, out)
    write_outputs(outdir, out, model)
    manifest = {
        "config": cfg,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "wall_time": time.time() - started,
        "status": status,
        "abort": abort_info,
        "stats": {k: _jsonable(v) for k, v in out.stats.items()},
        "n_events": len(out.events),
        "resumed_from": float(state.t) if state.t > t_grid0 else None,
    }
    _write_json(outdir / "manifest.json", manifest)
    return out, (EXIT_ABORTED if status == "aborted" else 0)


# ---------------------------------------------------------------------------
# sweeps


SWEEP_AXES = {"M": ("M",), "N": ("model", "N"), "alpha": ("model", "alpha")}


def _set_path(cfg, path, value):
    node = cfg
    for p in path[:-1]:
        node = node[p]
    node[path[-1]] = value


def _sweep_one(args):
    cfg, outdir = args
    out, status = execute(cfg, outdir)
    return out.times, _sweep_observable(out, cfg), status


def _sweep_observable(out, cfg):
    if cfg["model"]["type"] == "spin_boson":
        return observables.population_z_series(out.A, out.F)
    rho = observables.site_populations_series(out.A, out.F)
    return rho[:, rho.shape[1] // 2 - 1]  # site 0


def sweep(cfg, axis, values, outdir, workers=None):
    """Run ``cfg`` for each value along ``axis``; Delta against the largest value."""
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}")
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    cfg = config.resolved(cfg)
    outdir = Path(outdir)
    jobs = []
    for v in values:
        c = json.loads(json.dumps(cfg))
        _set_path(c, SWEEP_AXES[axis], v)
        config.validate(c, f"sweep {axis}={v}")
        jobs.append((c, str(outdir / f"{axis}_{v}")))
    workers = workers or int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    ref = int(np.argmax(values))
    t_ref, p_ref, _ = results[ref]
    rows = []
    for v, (t, p, status) in zip(values, results):
        if status or len(t) != len(t_ref):
            delta = float("nan")
        else:
            delta = observables.error_measure(observables.TimeSeries(t_ref, p_ref),
                                              observables.TimeSeries(t, p))
        rows.append((v, delta))
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis, "delta"])
        for v, d in rows:
            w.writerow([v, repr(d)])
    return rows, max(r[2] for r in results)


# ---------------------------------------------------------------------------
# spectrum


def spectrum(run_dir):
    """Autocorrelation and absorption spectrum of a finished Holstein run."""
    run_dir = Path(run_dir)
    cfg = config.resolved(config.load(run_dir / "config.json"))
    if cfg["model"]["type"] != "holstein":
        raise ConfigurationError("spectra need a Holstein run")
    model = config.build_model(cfg)
    traj = np.load(run_dir / "trajectory.npz")
    times, A, F = traj["times"], traj["A"], traj["F"]
    raw, normalized = observables.autocorrelation(A, F)
    observables.write_autocorrelation_csv(run_dir / "autocorrelation.csv", times, raw, normalized)
    damping = cfg["spectrum"]["damping"] or (times[-1] - times[0]) / 5
    omega, spec = observables.absorption_spectrum(observables.TimeSeries(times, normalized),
                                                  damping=damping, pad=cfg["spectrum"]["pad"])
    S = model.params.huang_rhys
    ref = observables.poisson_reference(omega, S, model.params.omega0, width=1.0 / damping)
    observables.write_spectrum_csv(run_dir / "spectrum.csv", omega, spec, ref)
    bands = observables.analyze_sidebands(omega, spec, model.params.omega0)
    summary = {
        "huang_rhys": S,
        "damping": damping,
        "peak_centers": bands.centers.tolist(),
        "peak_heights": bands.heights.tolist(),
        "peak_spacing": bands.spacing,
        "band_areas": bands.areas.tolist(),
        "poisson_lambda": bands.lam,
        "negative_weight": observables.negative_weight(omega, spec),
    }
    _write_json(run_dir / "sidebands.json", summary)
    return summary


# ---------------------------------------------------------------------------
# argument parsing


def _load_config(args):
    if args.preset:
        cfg = config.load_preset(args.preset)
    elif args.config:
        cfg = config.load(args.config)
    else:
        raise ConfigurationError("give a configuration file or --preset")
    return config.apply_overrides(cfg, args.set)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser():
    p = argparse.ArgumentParser(prog="multid2", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", nargs="?", help="JSON run configuration")
        sp.add_argument("--preset", choices=config.PRESETS, help="use a shipped preset")
        sp.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                        help="override a configuration entry (repeatable)")
        sp.add_argument("-o", "--output", help="output directory (overrides output.directory)")

    common(sub.add_parser("run", help="propagate one configuration"))
    sw = sub.add_parser("sweep", help="convergence sweep along one parameter")
    common(sw)
    sw.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sw.add_argument("--values", required=True, nargs="+", type=_parse_value)
    sw.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    rs = sub.add_parser("resume", help="continue a run from its checkpoint")
    rs.add_argument("checkpoint")
    rs.add_argument("-o", "--output", help="output directory (default: the checkpoint's)")
    sp = sub.add_parser("spectrum", help="absorption spectrum of a finished Holstein run")
    sp.add_argument("run_dir")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = _load_config(args)
            _, status = execute(cfg, args.output)
            return status
        if args.command == "sweep":
            cfg = _load_config(args)
            outdir = args.output or config.resolved(cfg)["output"]["directory"]
            rows, status = sweep(cfg, args.axis, args.values, outdir, args.workers)
            for v, d in rows:
                print(f"{args.axis}={v}\tdelta={d:.6g}")
            return status
        if args.command == "resume":
            with open(args.checkpoint, encoding="utf-8") as fh:
                data = json.load(fh)
            cfg = data["config"]
            config.validate(cfg, args.checkpoint)
            state = EnsembleState.from_dict(data["state"])
            outdir = args.output or str(Path(args.checkpoint).resolve().parent)
            _, status = execute(cfg, outdir, state=state)
            return status
        if args.command == "spectrum":
            summary = spectrum(args.run_dir)
            print(json.dumps(summary, indent=2))
            return 0
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (Multid2Error, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
