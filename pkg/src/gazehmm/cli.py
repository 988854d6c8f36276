"""``gazehmm`` command line: fixations -> train -> reduce -> classify.

Exit codes: 0 success, 2 data or validation error, 64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .classify import RULES, classify_many, confusion
from .errors import GazeHmmError
from .fixation import (Fixation, FixationTrial, IdtConfig, detect_fixations, fixation_stats,
                       read_fixation_csv, write_fixation_csv)
from .gaze_io import (Manifest, load_bundled_models, load_model_file, parse_gaze_csv,
                      read_manifest, record_from_dict, validate_model, write_model)
from .hmm import GaussianHmm, TrainConfig, fit_map, sample
from .svg import render_scanpath_svg
from .vhem import VhemConfig, hard_assignments, mixture_to_json, reduce

log = logging.getLogger("gazehmm")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 2, 64
DEFAULT_SEED = 0
SIM_FIXATION_MS = 250.0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _meta(args, **extra) -> dict:
    return {"tool_version": __version__, "seed": args.seed, "command": args.command, **extra}


def _write(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.write_bytes(data)
    log.info("wrote %s", path)


def _json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name) or "_"


def _load_models(paths):
    out = []
    for p in paths:
        rec = load_model_file(p)
        out.append((Path(p), rec))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_fixations(args) -> int:
    config = _config(IdtConfig, dispersion_px=args.dispersion_px,
                     min_duration_ms=args.min_duration_ms)
    trials = parse_gaze_csv(Path(args.gaze_csv).read_bytes())
    out = [FixationTrial(t.participant_id, t.trial_id, t.condition,
                         tuple(detect_fixations(t.samples, config))) for t in trials]
    meta = _meta(args, dispersion_px=config.dispersion_px, min_duration_ms=config.min_duration_ms)
    outdir = Path(args.output)
    _write(outdir / "fixations.csv", write_fixation_csv(out, meta))
    stats = fixation_stats(tr.fixations for tr in out) if any(tr.fixations for tr in out) else None
    _write(outdir / "fixation_stats.json", _json({
        "meta": meta,
        "n_trials": len(out),
        "n_fixations": sum(len(tr.fixations) for tr in out),
        "mean_duration_ms": None if stats is None else stats.mean_duration_ms,
        "sd_duration_ms": None if stats is None else stats.sd_duration_ms,
        "mean_count_per_trial": None if stats is None else stats.mean_count_per_trial,
    }))
    return EXIT_OK


def _config(cls, **kw):
    try:
        return cls(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_config(args) -> TrainConfig:
    return _config(TrainConfig, n_states=args.states, dirichlet_alpha=args.alpha,
                   prior_cov_std=args.prior_std, prior_cov_strength=args.prior_strength,
                   max_iters=args.max_iters, tol=args.tol, n_restarts=args.restarts,
                   seed=args.seed)


def cmd_train(args) -> int:
    keys = [k.strip() for k in args.group_by.split(",") if k.strip()]
    allowed = {"participant_id", "condition", "trial_id"}
    if not keys or set(keys) - allowed:
        raise UsageError(f"--group-by takes a comma list of {sorted(allowed)}")
    config = _train_config(args)
    trials = read_fixation_csv(Path(args.fixation_csv).read_bytes())
    groups: dict[tuple, list[FixationTrial]] = {}
    for tr in trials:
        if tr.fixations:
            groups.setdefault(tuple(getattr(tr, k) for k in keys), []).append(tr)
    outdir = Path(args.output)
    written = 0
    for key in sorted(groups):
        seqs = [tr.points() for tr in groups[key]]
        n_obs = sum(len(s) for s in seqs)
        name = "__".join(_safe(v) for v in key)
        if n_obs < config.n_states:
            log.warning("skipping group %s: %d observations for %d states", name, n_obs, config.n_states)
            continue
        model, trace = fit_map(seqs, config)
        info = dict(zip(keys, key))
        label = info.get("condition")
        meta = _meta(args, group=info, n_sequences=len(seqs), n_observations=n_obs,
                     objective_trace=[float(f"{v:.10g}") for v in trace],
                     config={k: getattr(config, k) for k in config.__dataclass_fields__})
        model = GaussianHmm(model.prior, model.transition, model.means, model.covs,
                            label=label if label != "unknown" else None, meta=meta)
        _write(outdir / f"{name}.json", write_model(model.to_record()))
        written += 1
    if written == 0:
        log.error("no group had enough observations to train")
        return EXIT_DATA
    return EXIT_OK


def cmd_reduce(args) -> int:
    loaded = _load_models(args.models)
    config = _config(VhemConfig, n_reduced=args.k_reduced, virtual_len=args.tau,
                     virtual_count=args.nv, max_iters=args.max_iters, tol=args.tol,
                     n_restarts=args.restarts, seed=args.seed)
    models = [GaussianHmm.from_record(rec) for _, rec in loaded]
    mixture = reduce(models, None, config)
    names = [str(p) for p, _ in loaded]
    meta = _meta(args, config={k: getattr(config, k) for k in config.__dataclass_fields__})
    outdir = Path(args.output)
    _write(outdir / "mixture.json", mixture_to_json(mixture, names, meta))
    hard = hard_assignments(mixture)
    buf = io.StringIO()
    buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "label", "cluster"] + [f"z{j}" for j in range(config.n_reduced)])
    for (path, rec), h, z in zip(loaded, hard, mixture.assignments):
        w.writerow([str(path), rec.label or "", int(h)] + [f"{v:.10g}" for v in z])
    _write(outdir / "assignments.csv", buf.getvalue())
    for j, m in enumerate(mixture.models):
        _write(outdir / f"cluster{j}.json",
               write_model(m.with_meta(**meta, weight=float(f"{mixture.weights[j]:.10g}")).to_record()))
    return EXIT_OK


def _candidates(paths):
    out = {}
    for path, rec in _load_models(paths):
        label = rec.label or path.stem
        if label in out:
            raise GazeHmmError(f"duplicate candidate label {label!r} ({path})")
        out[label] = GaussianHmm.from_record(rec)
    return out


def cmd_classify(args) -> int:
    candidates = _candidates(args.models)
    trials = [tr for tr in read_fixation_csv(Path(args.fixation_csv).read_bytes()) if tr.fixations]
    truths = [tr.condition if tr.condition != "unknown" else None for tr in trials]
    reports = classify_many([tr.points() for tr in trials], candidates, args.rule, truths=truths)
    meta = _meta(args, candidates=sorted(candidates))
    rows = []
    for tr, rep in zip(trials, reports):
        rows.append({"participant_id": tr.participant_id, "trial_id": tr.trial_id, **rep.to_dict()})
    report = {"meta": meta, "rule": args.rule, "reports": rows}
    labelled = [(r.chosen, r.truth) for r in reports if r.truth is not None]
    outdir = Path(args.output)
    if labelled:
        labels = sorted(set(candidates) | {t for _, t in labelled})
        cm = confusion([p for p, _ in labelled], [t for _, t in labelled], labels)
        report["accuracy"] = {"overall": cm.overall, "per_class": cm.per_class}
        _write(outdir / "confusion.csv", "# " + json.dumps(meta, sort_keys=True) + "\n" + cm.to_csv())
    _write(outdir / "report.json", _json(report))
    return EXIT_OK


def cmd_simulate(args) -> int:
    trials = []
    for mi, (path, rec) in enumerate(_load_models(args.models)):
        label = args.label or rec.label
        if not label:
            raise UsageError(f"model {path} has no label; pass --label")
        participant = str(rec.meta.get("participant_id", path.stem))
        model = GaussianHmm.from_record(rec)
        for n in range(args.trials):
            obs, _ = sample(model, args.len, np.random.SeedSequence([args.seed, mi, n]))
            fx = tuple(Fixation(float(x), float(y), t * SIM_FIXATION_MS, SIM_FIXATION_MS, 1)
                       for t, (x, y) in enumerate(obs))
            trials.append(FixationTrial(participant, f"{_safe(label)}-{n:05d}", label, fx))
    meta = _meta(args, trials=args.trials, len=args.len)
    _write(Path(args.output), write_fixation_csv(trials, meta))
    return EXIT_OK


def cmd_validate(args) -> int:
    if not args.models and not args.bundled:
        raise UsageError("give model files or --bundled")
    records = []
    if args.bundled:
        records += [(f"bundled:{k}", r) for k, r in load_bundled_models().items()]
    status = EXIT_OK
    for p in args.models:
        try:
            obj = json.loads(Path(p).read_bytes().decode("utf-8"))
            records.append((p, record_from_dict(obj, validate=False)))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError, GazeHmmError) as exc:
            print(f"{p}: unreadable: {exc}", file=sys.stderr)
            status = EXIT_DATA
    for name, rec in records:
        try:
            violations = validate_model(rec)
        except GazeHmmError as exc:
            print(f"{name}: {exc}")
            status = EXIT_DATA
            continue
        if violations:
            status = EXIT_DATA
            for v in violations:
                print(f"{name}: {v}")
        else:
            print(f"{name}: ok")
    return status


def cmd_bundled(args) -> int:
    outdir = Path(args.output)
    for label, rec in load_bundled_models().items():
        _write(outdir / f"{label}.json", write_model(rec))
    return EXIT_OK


def cmd_plot(args) -> int:
    if (args.fixations is None) == (args.model is None):
        raise UsageError("give exactly one of --fixations or --model")
    manifest = read_manifest(Path(args.manifest).read_bytes()) if args.manifest else Manifest()
    meta = _meta(args)
    if args.model:
        rec = load_model_file(args.model)
        svg = render_scanpath_svg(model=rec, manifest=manifest, meta=meta, title=rec.label)
    else:
        trials = read_fixation_csv(Path(args.fixations).read_bytes())
        if args.trial:
            trials = [t for t in trials if t.trial_id == args.trial]
            if not trials:
                raise GazeHmmError(f"no trial {args.trial!r} in {args.fixations}")
        svg = render_scanpath_svg(fixations=trials[0].fixations if trials else [],
                                  manifest=manifest, meta=meta,
                                  title=f"{trials[0].participant_id}/{trials[0].trial_id}" if trials else None)
    _write(Path(args.output), svg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gazehmm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--config", help="JSON file of option defaults (flags override)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        return p

    p = add("fixations", cmd_fixations, "detect fixations in a gaze CSV")
    p.add_argument("gaze_csv")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--dispersion-px", type=float, default=5.0)
    p.add_argument("--min-duration-ms", type=float, default=100.0)

    p = add("train", cmd_train, "fit one HMM per group of fixation trials")
    p.add_argument("fixation_csv")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--states", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--prior-std", type=float, default=14.0)
    p.add_argument("--prior-strength", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--group-by", default="participant_id,condition")

    p = add("reduce", cmd_reduce, "cluster HMMs into representatives (VHEM)")
    p.add_argument("models", nargs="+")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--k-reduced", type=int, default=1)
    p.add_argument("--tau", type=int, default=19)
    p.add_argument("--nv", type=int, default=40)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--restarts", type=int, default=5)

    p = add("classify", cmd_classify, "classify fixation trials against candidate models")
    p.add_argument("fixation_csv")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--rule", choices=RULES, default="loglik")
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = add("simulate", cmd_simulate, "sample labelled fixation sequences from models")
    p.add_argument("models", nargs="+")
    p.add_argument("--trials", type=int, default=40)
    p.add_argument("--len", type=int, default=19)
    p.add_argument("--label")
    p.add_argument("-o", "--output", required=True, help="output CSV")

    p = add("validate", cmd_validate, "check model files against the model invariants")
    p.add_argument("models", nargs="*")
    p.add_argument("--bundled", action="store_true", help="also check the bundled models")

    p = add("bundled", cmd_bundled, "write the bundled representative models")
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = add("plot", cmd_plot, "render fixations or a model as SVG")
    p.add_argument("--fixations")
    p.add_argument("--trial")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("-o", "--output", required=True, help="output SVG")
    return parser


def _config_defaults(parser, argv):
    """Apply --config JSON values as subcommand defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = json.loads(Path(known.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise GazeHmmError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise GazeHmmError("config must be a JSON object")
    overrides = {k.replace("-", "_"): v for k, v in cfg.items()
                 if k not in ("screen", "face_center", "trials_csv")}
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in overrides.items() if k in dests})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _config_defaults(parser, argv)
    except GazeHmmError as exc:
        print(f"gazehmm: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gazehmm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GazeHmmError, OSError, ValueError) as exc:
        print(f"gazehmm {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
