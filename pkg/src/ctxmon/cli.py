"""Command-line entry point.

Every subcommand reads an :class:`ExperimentConfig`, writes its outputs to a
run directory and finishes with ``manifest.json``: command, arguments,
config and its hash, root seed, package versions and the sha256 of every
deterministic output.  Wall-clock figures go to ``timing.json``, which the
manifest lists separately because it changes from run to run.

``ctxmon rerun RUN/manifest.json`` repeats a run and compares hashes.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .classifiers import (
    DetectorLibrary,
    GestureClassifier,
    build_detector_model,
    build_gesture_model,
    compute_jitter,
    segment_predictions,
    train_error_detectors,
)
from .config import ConfigError, ExperimentConfig
from .experiment import build_e2e_corpus, load_corpus, make_loso_folds, run_e2e, simulate_corpus
from .faults import InjectionError, OracleError, OracleParams, calibrate_dtw_threshold, run_campaign, table3_grid
from .kinematics import ConfigurationError, FeatureSubset, TrajectoryError, save_trajectory
from .metrics import DivergenceError, divergence_matrix, erroneous_window_features
from .monitor import MODES, evaluate_pipeline, write_alert_log
from .nn import BundleError, gradient_check
from .simulator import SimParams, write_demo
from .task_model import MarkovError, block_transfer_chain, estimate_markov, sample_sequence, suturing_chain
from .utils import derive_seed, sha256_file, write_json

log = logging.getLogger("ctxmon")

GRADCHECK_TOL = 1e-4
TIMING_FILE = "timing.json"

# dest -> option string, so a manifest can be turned back into argv
_FLAGS: dict[str, dict[str, str]] = {}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run directory


class Run:
    """Collects outputs of one subcommand and writes the manifest."""

    def __init__(self, command, args, cfg: ExperimentConfig, out: Path):
        self.command = command
        self.args = args
        self.cfg = cfg
        self.out = out
        self.timing = {}
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")

    def json(self, name, obj):
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        write_json(path, obj)
        return path

    def text(self, name, text):
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        return path

    def finish(self):
        write_json(self.out / TIMING_FILE, self.timing)
        outputs = {}
        for p in sorted(self.out.rglob("*")):
            rel = p.relative_to(self.out).as_posix()
            if p.is_file() and rel not in ("manifest.json", TIMING_FILE):
                outputs[rel] = sha256_file(p)
        manifest = {
            "command": self.command,
            "args": self.args,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash,
            "seed": self.cfg["run"]["seed"],
            "versions": versions(),
            "outputs": outputs,
            "nondeterministic": [TIMING_FILE],
        }
        write_json(self.out / "manifest.json", manifest)
        return manifest


def versions():
    import scipy
    import sklearn

    return {"ctxmon": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "sklearn": sklearn.__version__}


def _corpus(args, cfg: ExperimentConfig, labelled=True):
    """Trajectories from ``--data`` or, failing that, the synthetic e2e corpus."""
    if getattr(args, "data", None):
        return load_corpus(args.data, args.format)
    if cfg["run"]["data_dir"]:
        return load_corpus(cfg["run"]["data_dir"], args.format)
    if cfg["run"]["task"] != "block_transfer":
        raise UsageError("the suturing task has no simulator; pass --data with a JIGSAWS directory")
    e2e = cfg.e2e_config()
    if not labelled:
        return simulate_corpus(e2e)
    return build_e2e_corpus(e2e)[0]


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args, cfg, run: Run):
    e2e = cfg.e2e_config()
    if args.n is not None:
        e2e.n_demos = args.n
    demos = simulate_corpus(e2e)
    from .experiment import sim_params

    for i, t in enumerate(demos):
        write_demo(t, sim_params(e2e, i), run.out / "demos")
    run.json("index.json", [{"name": t.name, "group": t.group, "n_samples": len(t),
                             "segments": [s.to_dict() for s in t.segments]} for t in demos])
    print(f"wrote {len(demos)} demonstrations to {run.out / 'demos'}")


def cmd_inject(args, cfg, run: Run):
    e2e = cfg.e2e_config()
    if args.n is not None:
        e2e.n_demos = args.n
    base = load_corpus(args.data, args.format) if args.data else None
    corpus, info = build_e2e_corpus(e2e, base=base)
    (run.out / "demos").mkdir(exist_ok=True)
    for t in corpus:
        save_trajectory(t, run.out / "demos" / f"{t.name}.csv")
    run.json("scenarios.json", info)
    n_f = sum(d["scenario"] != "none" for d in info["demos"])
    n_u = sum(any(s.unsafe for s in t.segments) for t in corpus)
    print(f"{len(corpus)} demonstrations, {n_f} faulted, {n_u} with an unsafe gesture")


def cmd_campaign(args, cfg, run: Run):
    f = cfg["faults"]
    e2e = cfg.e2e_config()
    e2e.n_demos = f["campaign_demos"]
    corpus = load_corpus(args.data, args.format) if args.data else simulate_corpus(e2e)
    oracle = OracleParams(arm=cfg["simulate"]["arm"])
    oracle.dtw_threshold = calibrate_dtw_threshold(corpus[:f["dtw_calibration_demos"]], oracle,
                                                   SimParams().noise["position"], seed=cfg.seed_for("dtw"))
    cells = table3_grid(f["n_per_cell"])
    t0 = time.perf_counter()
    res = run_campaign(cells, corpus, cfg.seed_for("campaign"), oracle, f["theta"],
                       run.out / "runs" if args.save_trajectories else None)
    run.timing["campaign_s"] = time.perf_counter() - t0
    res.write_report(run.out / "campaign.csv")
    res.write_runs(run.out / "runs.json")
    summary = [{"cell": i, "grasper": list(c.grasper), "duration": list(c.duration), "cart": list(c.cart),
                **res.counts[i], **{f"rate_{k}": v for k, v in res.rates(i).items()}}
               for i, c in enumerate(cells)]
    run.json("summary.json", {"dtw_threshold": oracle.dtw_threshold, "cells": summary, "totals": res.totals})
    for s in summary:
        print(f"S'={s['grasper']} D={s['duration']}: n={s['n_injections']} "
              f"block-drop={s['rate_blockdrop']:.2f} dropoff={s['rate_dropoff']:.2f}")


def cmd_train_gestures(args, cfg, run: Run):
    corpus = _corpus(args, cfg)
    folds = make_loso_folds(corpus)
    k_persist = cfg["gesture"]["persistence_k"]
    rows = []
    for k, fold in enumerate(folds):
        params = cfg.gesture_params()
        params["seed"] = cfg.seed_for("gesture", k)
        clf = GestureClassifier(**params).fit([corpus[i] for i in fold.train])
        test = [corpus[i] for i in fold.test]
        jit = []
        for t in test:
            psegs, _ = segment_predictions(clf.predict_stream(t), k_persist)
            jit.extend(compute_jitter(psegs, t.segments, t.t_ms).records)
        v = np.array([r["jitter_ms"] for r in jit]) if jit else np.empty(0)
        rows.append({"fold": k, "test_group": fold.test_group, "n_train": len(fold.train),
                     "n_test": len(fold.test), "accuracy": clf.score(test),
                     "jitter_mean_ms": float(v.mean()) if len(v) else None,
                     "jitter_mean_abs_ms": float(np.abs(v).mean()) if len(v) else None})
        (run.out / f"gesture_fold_{fold.test_group}.bundle").write_bytes(clf.to_bytes())
        print(f"fold {fold.test_group}: accuracy {rows[-1]['accuracy']:.4f}")
    params = cfg.gesture_params()
    params["seed"] = cfg.seed_for("gesture", "all")
    (run.out / "gesture_model.bundle").write_bytes(GestureClassifier(**params).fit(corpus).to_bytes())
    mean = float(np.mean([r["accuracy"] for r in rows]))
    run.json("report.json", {"folds": rows, "mean_accuracy": mean})
    print(f"mean LOSO accuracy {mean:.4f}")


def cmd_train_detectors(args, cfg, run: Run):
    corpus = _corpus(args, cfg)
    d = cfg["detector"]
    gm = GestureClassifier.from_bytes(Path(args.gesture_model).read_bytes()) if args.gesture_model else None
    t0 = time.perf_counter()
    lib = train_error_detectors(corpus, cfg.detector_window(), FeatureSubset.coerce(d["subset"]),
                                cfg.detector_params(), d["min_samples"], cfg.seed_for("detectors"),
                                gesture_model=gm, boundary_margin=d["boundary_margin"])
    run.timing["train_s"] = time.perf_counter() - t0
    lib.threshold = d["threshold"]
    lib.persistence_k = cfg["gesture"]["persistence_k"]
    lib.save(run.out / "library")
    routing = {f"G{g}": p for g, p in lib.routing_table().items()}
    run.json("report.json", {"routing": routing, "degenerate": lib.degenerate, "n_demos": len(corpus)})
    for g, p in routing.items():
        print(f"{g} -> {p}")


def cmd_monitor(args, cfg, run: Run):
    lib = DetectorLibrary.load(args.library)
    if args.trajectory:
        from .kinematics import load_trajectory

        corpus = [load_trajectory(args.trajectory, args.format)]
    else:
        corpus = _corpus(args, cfg)
    if args.mode == "predicted_gestures" and lib.gesture_model is None:
        raise UsageError("library has no gesture model; train detectors with --gesture-model or use another mode")
    rep = evaluate_pipeline(lib, corpus, args.mode)
    write_alert_log(rep.alerts, run.out / "alerts.csv")
    run.json("report.json", rep.to_dict())
    run.text("table.txt", rep.table(include_latency=False))
    run.timing["latency_ms_mean"] = rep.latency_ms_mean
    print(f"{len(rep.alerts)} alerts over {len(corpus)} demonstrations")


def cmd_evaluate(args, cfg, run: Run):
    modes = tuple(args.modes.split(",")) if args.modes else MODES
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}; choose from {', '.join(MODES)}")
    t0 = time.perf_counter()
    if args.library:
        lib = DetectorLibrary.load(args.library)
        corpus = _corpus(args, cfg)
        reps = {m: evaluate_pipeline(lib, corpus, m) for m in modes}
        result = {m: r.to_dict() for m, r in reps.items()}
        tables = "".join(r.table(include_latency=False) + "\n" for r in reps.values())
        run.timing["latency_ms_mean"] = {m: r.latency_ms_mean for m, r in reps.items()}
        summary = {m: r.aggregate for m, r in reps.items()}
        for m, r in reps.items():
            summary[m]["gesture_accuracy"] = r.gesture_accuracy
    else:
        corpus = _corpus(args, cfg) if (args.data or cfg["run"]["data_dir"]) else None
        res = run_e2e(cfg.e2e_config(), corpus, modes)
        result = {"pooled": res["pooled"],
                  "folds": [{**{k: v for k, v in f.items() if k != "reports"},
                             "reports": {m: r.to_dict() for m, r in f["reports"].items()}} for f in res["folds"]]}
        run.timing["latency_ms_mean"] = {f["test_group"]: {m: r.latency_ms_mean for m, r in f["reports"].items()}
                                         for f in res["folds"]}
        summary = res["pooled"]
        tables = _pooled_table(summary)
    run.timing["evaluate_s"] = time.perf_counter() - t0
    run.json("report.json", result)
    run.json("summary.json", summary)
    run.text("table.txt", tables)
    print(tables, end="")


def _pooled_table(pooled) -> str:
    keys = ("AUC", "AUC_gesture", "F1", "TPR", "TNR", "PPV", "NPV", "early_detection_pct", "gesture_accuracy")
    modes = list(pooled)
    lines = ["metric".ljust(20) + "".join(m.ljust(24) for m in modes)]
    for k in keys:
        vals = ["-" if pooled[m].get(k) is None else f"{pooled[m][k]:.3f}" for m in modes]
        lines.append(k.ljust(20) + "".join(v.ljust(24) for v in vals))
    react = ["-" if pooled[m]["reaction"].get("mean_ms") is None else f"{pooled[m]['reaction']['mean_ms']:.0f}"
             for m in modes]
    lines.append("react_mean_ms".ljust(20) + "".join(v.ljust(24) for v in react))
    return "\n".join(lines) + "\n"


def cmd_diverge(args, cfg, run: Run):
    corpus = _corpus(args, cfg)
    dv = cfg["diverge"]
    feats = erroneous_window_features(corpus, cfg.detector_window(), FeatureSubset.coerce(cfg["detector"]["subset"]))
    omitted = sorted(int(g) for g, X in feats.items() if len(X) < dv["min_samples"])
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        dm = divergence_matrix(feats, dv["min_samples"], dv["n_points"], dv["max_samples"], cfg.seed_for("diverge"))
    dm.to_csv(run.out / "divergence.csv")
    top = [{"jsd": float(v), "pair": [f"G{a}", f"G{b}"]} for v, a, b in dm.largest_pairs(3)]
    run.json("report.json", {"classes": [f"G{c}" for c in dm.classes], "omitted": [f"G{g}" for g in omitted],
                             "largest": top})
    for t in top:
        print(f"{t['pair'][0]}-{t['pair'][1]}: {t['jsd']:.4f}")


def cmd_markov(args, cfg, run: Run):
    mk = cfg["markov"]
    reference = block_transfer_chain() if cfg["run"]["task"] == "block_transfer" else suturing_chain()
    seqs = [sample_sequence(reference, derive_seed(cfg.seed_for("markov"), i), mk["max_len"])
            for i in range(mk["n_sequences"])]
    recovered = estimate_markov(seqs, reference.states)
    err = float(np.abs(recovered.transitions - reference.transitions).max())
    report = {"reference": reference.to_dict(), "recovered_max_abs_error": err, "n_sequences": mk["n_sequences"]}
    if args.data or cfg["run"]["task"] == "block_transfer":
        corpus = _corpus(args, cfg, labelled=False)
        gseqs = [[s.gesture_id for s in t.segments] for t in corpus]
        known = all(g in reference.states for q in gseqs for g in q)
        chain = estimate_markov(gseqs, reference.states if known else None)
        chain.save(run.out / "chain.json")
        report["corpus_chain"] = chain.to_dict()
        if cfg["run"]["task"] == "block_transfer":
            report["matches_deterministic_chain"] = bool(
                chain.states.ids == reference.states.ids
                and np.array_equal(chain.transitions, reference.transitions)
                and np.array_equal(chain.initial, reference.initial))
    run.json("report.json", report)
    print(f"max |P_hat - P| over {mk['n_sequences']} sampled sequences: {err:.4f}")
    if "matches_deterministic_chain" in report:
        print(f"corpus chain is the deterministic chain: {report['matches_deterministic_chain']}")


def gradcheck_models(seed=0):
    """The three architectures in use, at small sizes, with matching inputs."""
    rng = np.random.default_rng(seed)
    d, T, w = 6, 7, 10
    out = {}
    g = build_gesture_model(d, (8, 6), 5, n_classes=4, seed=seed)
    y = np.zeros((2, T, 4))
    y[np.arange(2)[:, None], np.arange(T)[None], rng.integers(0, 4, (2, T))] = 1.0
    out["gesture_lstm"] = (g, rng.normal(size=(2, T, d)), y, np.ones((2, T)))
    conv = build_detector_model(d, w, "conv", (4, 3), 3, fc_units=(5,), dropout=0.2, seed=seed)
    out["detector_conv"] = (conv, rng.normal(size=(8, w, d)), rng.integers(0, 2, (8, 1)).astype(float), None)
    base = build_detector_model(d, w, "conv", (4, 3), 5, fc_units=(6, 4), seed=seed + 1)
    out["baseline_conv"] = (base, rng.normal(size=(8, w, d)), rng.integers(0, 2, (8, 1)).astype(float), None)
    lstm = build_detector_model(d, w, "lstm", lstm_units=(5, 4), fc_units=(4,), seed=seed)
    out["detector_lstm"] = (lstm, rng.normal(size=(8, w, d)), rng.integers(0, 2, (8, 1)).astype(float), None)
    # zero biases put all-zero rows exactly on a ReLU kink, where the
    # derivative is one-sided; probe from a generic point instead
    for model, *_ in out.values():
        for _, name, p in model.parameters():
            if name == "b":
                p += rng.normal(scale=0.1, size=p.shape)
    return out


def cmd_gradcheck(args, cfg, run: Run):
    t0 = time.perf_counter()
    errs = {}
    for name, (model, x, y, mask) in gradcheck_models(cfg.seed_for("gradcheck") % 1000).items():
        errs[name] = gradient_check(model, x, y, mask, fraction=args.fraction, min_count=50, h=1e-5, seed=0)
        print(f"{name}: max relative error {errs[name]:.3e}")
    run.timing["gradcheck_s"] = time.perf_counter() - t0
    worst = max(errs.values())
    run.json("report.json", {"max_relative_error": worst, "per_model": errs, "tolerance": GRADCHECK_TOL,
                             "passed": worst <= GRADCHECK_TOL})
    print(f"max relative error {worst:.3e} ({'ok' if worst <= GRADCHECK_TOL else 'FAILED'})")
    return 0 if worst <= GRADCHECK_TOL else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "inject": cmd_inject,
    "campaign": cmd_campaign,
    "train-gestures": cmd_train_gestures,
    "train-detectors": cmd_train_detectors,
    "monitor": cmd_monitor,
    "evaluate": cmd_evaluate,
    "diverge": cmd_diverge,
    "markov": cmd_markov,
    "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------- parser


def _add(p, command, flag, **kw):
    a = p.add_argument(flag, **kw)
    _FLAGS.setdefault(command, {})[a.dest] = flag
    return a


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (INI); defaults apply to missing keys")
    common.add_argument("--out", help="run directory (default: <output_dir>/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ctxmon", description="Context-aware safety monitoring toolkit.")
    parser.add_argument("--version", action="version", version=f"ctxmon {__version__}")
    parser.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def data_opts(p, name):
        _add(p, name, "--data", help="directory of trajectories (default: synthetic corpus)")
        _add(p, name, "--format", default="csv", choices=("csv", "jigsaws"))

    p = sub.add_parser("simulate", parents=[common], help="generate fault-free synthetic demonstrations")
    _add(p, "simulate", "--n", type=int, help="number of demonstrations (overrides simulate.n_demos)")

    p = sub.add_parser("inject", parents=[common], help="inject the end-to-end fault mix and label gestures")
    data_opts(p, "inject")
    _add(p, "inject", "--n", type=int, help="number of simulated demonstrations when --data is absent")

    p = sub.add_parser("campaign", parents=[common], help="fault-injection campaign over the grid")
    data_opts(p, "campaign")
    _add(p, "campaign", "--save-trajectories", action="store_true")

    p = sub.add_parser("train-gestures", parents=[common], help="LOSO gesture classifier training")
    data_opts(p, "train-gestures")

    p = sub.add_parser("train-detectors", parents=[common], help="train the per-gesture detector library")
    data_opts(p, "train-detectors")
    _add(p, "train-detectors", "--gesture-model", help="gesture classifier bundle to embed in the library")

    p = sub.add_parser("monitor", parents=[common], help="stream trajectories through a detector library")
    data_opts(p, "monitor")
    _add(p, "monitor", "--library", required=True)
    _add(p, "monitor", "--trajectory", help="single trajectory file instead of --data")
    _add(p, "monitor", "--mode", default="predicted_gestures", choices=MODES)

    p = sub.add_parser("evaluate", parents=[common], help="LOSO end-to-end evaluation, or a library on a corpus")
    data_opts(p, "evaluate")
    _add(p, "evaluate", "--library", help="evaluate this library instead of running LOSO training")
    _add(p, "evaluate", "--modes", help=f"comma-separated subset of {','.join(MODES)}")

    p = sub.add_parser("diverge", parents=[common], help="JSD matrix between per-gesture error distributions")
    data_opts(p, "diverge")

    p = sub.add_parser("markov", parents=[common], help="estimate the task chain and check recovery")
    data_opts(p, "markov")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every architecture")
    _add(p, "gradcheck", "--fraction", type=float, default=1.0, help="share of parameters probed")

    p = sub.add_parser("rerun", help="repeat a run from its manifest and compare output hashes")
    p.add_argument("manifest")
    p.add_argument("--out", help="run directory for the repeat (default: <run>_rerun)")
    return parser


# ---------------------------------------------------------------- driver


_PATH_DESTS = ("data", "library", "trajectory", "gesture_model")


def _recorded_args(command, args) -> dict:
    rec = {}
    for dest in sorted(_FLAGS.get(command, {})):
        v = getattr(args, dest, None)
        if v is not None and dest in _PATH_DESTS:
            v = str(Path(v).resolve())
        rec[dest] = v
    return rec


def _argv_from_record(command, rec) -> list[str]:
    argv = [command]
    for dest, v in sorted(rec.items()):
        if v is None or v is False:
            continue
        flag = _FLAGS[command][dest]
        argv.extend([flag] if v is True else [flag, str(v)])
    return argv


def _load_config(path) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(path) if path else ExperimentConfig()
    return cfg.validate()


def _run(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out) if args.out else cfg.output_root() / args.command
    run = Run(args.command, _recorded_args(args.command, args), cfg, out)
    t0 = time.perf_counter()
    status = COMMANDS[args.command](args, cfg, run) or 0
    run.timing["wall_s"] = time.perf_counter() - t0
    run.finish()
    return status


def _rerun(args) -> int:
    mpath = Path(args.manifest)
    if mpath.is_dir():
        mpath = mpath / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"manifest not found: {mpath}")
    m = json.loads(mpath.read_text(encoding="utf-8"))
    out = Path(args.out) if args.out else mpath.parent.with_name(mpath.parent.name + "_rerun")
    argv = _argv_from_record(m["command"], m["args"]) + ["--config", str(mpath.parent / "config.ini"),
                                                         "--out", str(out)]
    status = main(argv)
    new = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    diff = sorted(k for k in set(m["outputs"]) | set(new["outputs"]) if m["outputs"].get(k) != new["outputs"].get(k))
    for k in diff:
        print(f"differs: {k}")
    print("identical outputs" if not diff else f"{len(diff)} outputs differ")
    return status or (1 if diff else 0)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        sys.stdout.write(ExperimentConfig().to_ini())
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        print("ctxmon: error: a command is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _rerun(args) if args.command == "rerun" else _run(args)
    except ConfigError as exc:
        print(f"ctxmon: config error: {exc}", file=sys.stderr)
        return 1
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ctxmon: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, TrajectoryError, InjectionError, OracleError, MarkovError, DivergenceError,
            BundleError, FileNotFoundError, ValueError) as exc:
        print(f"ctxmon: {args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
