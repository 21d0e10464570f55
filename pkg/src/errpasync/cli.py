"""Command-line interface.

    errpasync synth          --seed 1 --out corpus/
    errpasync train-generic  --seed 7 --out model.json
    errpasync run-online     --model model.json --seed 11 --out S1/
    errpasync adapt-threshold --session S1/ --model model.json --blocks 1-3
    errpasync evaluate       --session S1/ --model model.json --blocks 4-8
    errpasync cross-validate --session S1/ --seed 3 --out cv/
    errpasync chance         --session S1/ --model model.json --seed 5 --out chance.json
    errpasync report         --out report/ chance1.json chance2.json

Exit status: 0 on success, 2 on usage errors (bad flags, missing paths or
invalid block lists), 3 when an archive or model file is corrupt, 1 for any
other failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .archive import FormatError, load_model, read_session, save_model, write_session
from .classifier import train_generic
from .config import Config
from .evaluation import (ConsistencyError, cross_validate, permuted_models, session_metrics,
                         smooth_and_select, tau_grid)
from .features import EpochSet
from .pipeline import (ADAPT_BLOCKS, EVAL_BLOCKS, chance_for_session, evaluate_session,
                       personalised_threshold, replay_blocks, train_from_seed, verify_replay)
from .report import build_report, curves_csv, report_text, write_report
from .session import parse_blocks
from .simulator import (make_profile, run_session, session_training_epochs, training_corpus,
                        training_profiles)

EXIT_USAGE = 2
EXIT_FORMAT = 3


class UsageError(Exception):
    pass


def _dump(obj, path=None) -> None:
    text = json.dumps(_plain(obj), indent=1, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return None if np.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _config(args) -> Config:
    if args.config is None:
        return Config()
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    try:
        return Config.load(path)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _require(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def _session(args):
    path = Path(args.session)
    if not path.is_dir():
        raise UsageError(f"session directory {path} does not exist")
    return read_session(path)


def _model(args):
    path = Path(args.model)
    if not path.is_file():
        raise UsageError(f"model file {path} does not exist")
    return load_model(path)


def _blocks(spec, session, default):
    available = [b.block for b in session.blocks]
    if spec is None:
        return [b for b in default if b in available]
    try:
        return parse_blocks(spec, available)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    """Open-loop donor sessions (no detector) for training a generic model."""
    _require(args, "out")
    cfg = _config(args)
    out = Path(args.out)
    summary = []
    for profile in training_profiles(_seed(args), cfg):
        session = run_session(profile, None, cfg)
        write_session(session, out / profile.participant_id)
        summary.append({"participant": profile.participant_id, "frames": session.n_frames,
                        "trials": len(session.trials)})
    _dump({"seed": _seed(args), "sessions": summary})
    return 0


def _session_dirs(root: Path) -> list:
    if (root / "meta.json").is_file():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file())
    if not dirs:
        raise UsageError(f"{root} contains no session directories")
    return dirs


def cmd_train_generic(args) -> int:
    _require(args, "out")
    cfg = _config(args)
    if args.session:
        root = Path(args.session)
        if not root.is_dir():
            raise UsageError(f"session directory {root} does not exist")
        corpus = EpochSet.concatenate(session_training_epochs(read_session(d), cfg)
                                      for d in _session_dirs(root))
        model = train_generic(corpus, cfg.variance_target, cfg.outlier_fraction,
                              threshold=cfg.tau0, filter_spec=cfg.filter_spec(),
                              info={"training_seed": None, "source": str(root)})
    else:
        model, corpus = train_from_seed(_seed(args), cfg)
    save_model(model, args.out)
    _dump({"model": str(args.out), **model.info})
    return 0


def cmd_run_online(args) -> int:
    _require(args, "model", "out")
    cfg = _config(args)
    model = _model(args)
    scale = args.scale if args.scale is not None else (
        cfg.sci_amplitude_scale if args.group == "sci" else 1.0)
    profile = make_profile(args.participant, _seed(args), args.group, scale, cfg)
    session = run_session(profile, model, cfg)
    write_session(session, args.out)
    _dump({"session": str(args.out), "participant": profile.to_dict(),
           "thresholds": session.thresholds(),
           "detections": int(session.detection_times().size)})
    return 0


def cmd_adapt_threshold(args) -> int:
    _require(args, "session", "model")
    cfg = _config(args)
    session, model = _session(args), _model(args)
    blocks = _blocks(args.blocks, session, ADAPT_BLOCKS)
    tau, sweep = personalised_threshold(session, model, blocks, cfg)
    _, s_tpr, s_tnr = smooth_and_select(sweep.tpr, sweep.tnr, sweep.grid, cfg.smoothing)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(curves_csv(sweep.grid, sweep.tpr, sweep.tnr, s_tpr, s_tnr))
    _dump({"tau": tau, "blocks": blocks, "grid_points": len(sweep.grid)})
    return 0


def cmd_evaluate(args) -> int:
    _require(args, "session")
    cfg = _config(args)
    session = _session(args)
    blocks = _blocks(args.blocks, session, EVAL_BLOCKS)
    if args.tau is not None:
        if args.model is None:
            raise UsageError("--tau needs --model to replay the recording")
        if not 0.0 <= args.tau <= 1.0:
            raise UsageError("--tau must lie in [0, 1]")
        replayed = replay_blocks(session, _model(args), blocks, tau=args.tau)
        det = np.concatenate([replayed[b][1] for b in blocks])
        metrics = session_metrics(session.trials_in(blocks), det, tau=args.tau, blocks=blocks,
                                  tp_window=cfg.tp_window, far_interval=cfg.far_interval)
    else:
        if args.model is not None:
            verify_replay(session, replay_blocks(session, _model(args), blocks))
        metrics = evaluate_session(session, blocks, cfg)
    p = session.participant
    result = {"participant": p.get("participant_id", ""), "group": p.get("group", ""),
              "scale": p.get("errp_amplitude_scale"), "tau": metrics.tau,
              **{k: v for k, v in metrics.to_dict().items() if k != "tau"}}
    _dump(result, args.out)
    return 0


def cmd_cross_validate(args) -> int:
    _require(args, "session")
    cfg = _config(args)
    session = _session(args)
    cv = cross_validate(session, reps=args.reps, folds=args.folds,
                        grid=tau_grid(cfg.grid_step), seed=_seed(args),
                        variance_target=cfg.variance_target,
                        outlier_fraction=cfg.outlier_fraction, n_perm=args.n_perm,
                        filter_spec=cfg.filter_spec(), window=cfg.window, leap=cfg.leap)
    summary = {"tau": cv.tau, "tpr": cv.tpr_at_tau, "tnr": cv.tnr_at_tau,
               "n_curves": int(cv.tpr_curves.shape[0])}
    if cv.chance_tpr is not None:
        g = int(np.argmin(np.abs(cv.grid - cv.tau)))
        summary["chance_tpr"] = float(cv.chance_tpr[g])
        summary["chance_tnr"] = float(cv.chance_tnr[g])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "curves.csv").write_text(curves_csv(cv.grid, cv.tpr, cv.tnr, cv.tpr, cv.tnr))
        _dump({**summary, "folds": cv.folds}, out / "cv.json")
    _dump(summary)
    return 0


def cmd_chance(args) -> int:
    _require(args, "session", "model")
    cfg = _config(args)
    session, model = _session(args), _model(args)
    training_seed = args.training_seed
    if training_seed is None:
        training_seed = model.info.get("training_seed")
    if training_seed is None:
        raise UsageError("model was not trained from a seed; pass --training-seed")
    eval_blocks = _blocks(args.blocks, session, EVAL_BLOCKS)
    tuning = None if args.tuning_blocks == "none" else _blocks(args.tuning_blocks, session,
                                                               ADAPT_BLOCKS)
    corpus = training_corpus(int(training_seed), cfg)
    weights, biases = permuted_models(corpus, args.n_perm, _seed(args), cfg.variance_target,
                                      cfg.outlier_fraction)
    del corpus
    res = chance_for_session(session, model, weights, biases, eval_blocks, tuning, cfg)
    metrics = evaluate_session(session, eval_blocks, cfg)
    p = session.participant
    result = {"participant": p.get("participant_id", ""), "group": p.get("group", ""),
              "scale": p.get("errp_amplitude_scale"), "tau": session.block(eval_blocks[0]).tau,
              "tpr": metrics.tpr, "tnr": metrics.tnr, "edr": metrics.edr, "far": metrics.far,
              "chance": res.chance, "p_values": res.p_values, "n_perm": args.n_perm,
              "tuning_blocks": tuning, "blocks": eval_blocks}
    _dump(result, args.out)
    return 0


def cmd_report(args) -> int:
    if not args.inputs:
        raise UsageError("report needs at least one result file")
    results = []
    for name in args.inputs:
        path = Path(name)
        if not path.is_file():
            raise UsageError(f"result file {path} does not exist")
        try:
            results.append(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        report = build_report(results)
    except KeyError as exc:
        raise FormatError(f"result file lacks field {exc}") from exc
    if args.out:
        write_report(report, args.out)
    sys.stdout.write(report_text(report))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train-generic": cmd_train_generic,
    "run-online": cmd_run_online,
    "adapt-threshold": cmd_adapt_threshold,
    "evaluate": cmd_evaluate,
    "cross-validate": cmd_cross_validate,
    "chance": cmd_chance,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="errpasync",
                                     description="Asynchronous ErrP detection pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        p.add_argument("--config", default=None, help="JSON config overriding defaults")
        p.add_argument("--out", default=None, help="output file or directory")
        return p

    add("synth", "write open-loop donor sessions")
    p = add("train-generic", "train the generic classifier")
    p.add_argument("--session", default=None,
                   help="directory of donor sessions (default: synthesise from --seed)")
    p = add("run-online", "closed-loop session of one synthetic participant")
    p.add_argument("--model", default=None)
    p.add_argument("--participant", default="P1")
    p.add_argument("--group", choices=("control", "sci"), default="control")
    p.add_argument("--scale", type=float, default=None, help="ErrP amplitude scale")
    for name, help_text in (("adapt-threshold", "personalised threshold from recorded blocks"),
                            ("evaluate", "trial metrics of a session")):
        p = add(name, help_text)
        p.add_argument("--session", default=None)
        p.add_argument("--model", default=None)
        p.add_argument("--blocks", default=None, help="e.g. 4-8 or 1,3")
        if name == "evaluate":
            p.add_argument("--tau", type=float, default=None,
                           help="replay at this threshold instead of the logged one")
    p = add("cross-validate", "repeated k-fold personalised classifier")
    p.add_argument("--session", default=None)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--n-perm", type=int, default=0)
    p = add("chance", "permutation chance levels and p-values")
    p.add_argument("--session", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--blocks", default=None)
    p.add_argument("--tuning-blocks", default=None,
                   help="blocks used to re-tune each permuted model, or 'none'")
    p.add_argument("--n-perm", type=int, default=100)
    p.add_argument("--training-seed", type=int, default=None)
    p = add("report", "tabulate result files")
    p.add_argument("inputs", nargs="*")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)      # exits with status 2 on bad flags
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"errpasync {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"errpasync {args.command}: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ConsistencyError as exc:
        print(f"errpasync {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
