"""Command-line entry point: one subcommand per pipeline stage plus ``run``.

Every subcommand accepts ``--config`` (TOML or JSON); values given as flags
override the file.  Exit status: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from hdpgp import __version__
from hdpgp import pipeline as pl
from hdpgp.errors import DataError, NumericalError

log = logging.getLogger("hdpgp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool_flag(p, name, dest, help):
    p.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help)
    p.add_argument(f"--no-{name}", dest=dest, action="store_false")


def _hyper_flags(p):
    p.add_argument("--gamma", type=float, help="top-level DP concentration")
    p.add_argument("--alpha", type=float, help="document / row-level DP concentration")
    p.add_argument("--d0", type=float, help="symmetric Dirichlet parameter of the word distributions")
    p.add_argument("--sweeps", type=int, help="Gibbs sweeps")
    p.add_argument("--burnin", type=int, help="sweeps discarded before a sample may be kept")
    p.add_argument("--seed", dest="sampler_seed", type=int, help="sampler seed")
    p.add_argument("--cutoff", type=float, help="cumulative share kept as typical")
    p.add_argument("--n-train", dest="n_train", type=int, help="number of leading clips to learn from")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hdpgp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="TOML or JSON config; flags win")
        p.set_defaults(func=func)
        return p

    p = add("quantize", _cmd_quantize, "Quantize a directory of .flo flow files into a clip corpus.")
    p.add_argument("--flow-dir", dest="flow_dir", required=True)
    p.add_argument("--cell", dest="cell_size", type=int)
    p.add_argument("--threshold", dest="flow_threshold", type=float)
    p.add_argument("--clip-frames", dest="clip_frames", type=int)
    p.add_argument("--out", required=True)

    for name, func, what in (("learn-activities", _cmd_learn_activities, "atomic activities (HDP)"),
                             ("learn-states", _cmd_learn_states, "traffic states (HDP-HMM)")):
        p = add(name, func, f"Learn {what} from the training clips of a corpus.")
        p.add_argument("--corpus")
        _hyper_flags(p)
        p.add_argument("--out", required=True)

    p = add("featurize", _cmd_featurize, "Coverage features of every clip against the typical word sets.")
    p.add_argument("--corpus")
    p.add_argument("--activities")
    p.add_argument("--states", help="label the training clips with their typical states")
    p.add_argument("--word-cutoff", dest="word_cutoff", type=float)
    p.add_argument("--out", required=True)

    p = add("train-gp", _cmd_train_gp, "Train the one-vs-all GP state classifier.")
    p.add_argument("--features")
    p.add_argument("--kernel", choices=("ard", "rbf"))
    _bool_flag(p, "optimize", "optimize", "optimize kernel hyperparameters (default on)")
    p.add_argument("--max-iter", dest="gp_max_iter", type=int)
    p.add_argument("--out", required=True)

    p = add("train-regressors", _cmd_train_regressors, "Train the per-activity conflict regressors.")
    p.add_argument("--features")
    _bool_flag(p, "optimize", "optimize", "optimize kernel hyperparameters (default on)")
    p.add_argument("--max-iter", dest="gp_max_iter", type=int)
    p.add_argument("--out", required=True)

    p = add("classify", _cmd_classify, "Fused state labels of the test clips.")
    p.add_argument("--features")
    p.add_argument("--gp")
    p.add_argument("--states")
    p.add_argument("--beta", type=float, help="transition energy weight")
    p.add_argument("--all", dest="include_train", action="store_true", help="also label the training clips")
    p.add_argument("--out", required=True)

    p = add("detect", _cmd_detect, "Anomaly events of the test clips as JSON Lines.")
    p.add_argument("--features")
    p.add_argument("--corpus")
    p.add_argument("--gp")
    p.add_argument("--gpr")
    p.add_argument("--states")
    p.add_argument("--beta", type=float)
    p.add_argument("--th-rare", dest="th_rare", type=int)
    p.add_argument("--th-trans", dest="th_trans", type=float)
    p.add_argument("--all", dest="include_train", action="store_true", help="also check the training clips")
    p.add_argument("--out", required=True)

    p = add("simulate", _cmd_simulate, "Generate a synthetic scene with injected anomalies.")
    p.add_argument("--spec", dest="scene", help="scene JSON; omitted keys use the default scene")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", dest="n_train", type=int, help="clips before the first injection")
    p.add_argument("--inject-per-kind", dest="inject_per_kind", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", required=True)

    p = add("evaluate", _cmd_evaluate, "Score labels and events against a ground truth.")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--events")
    p.add_argument("--activities", help="with --spec, add the topic matching table")
    p.add_argument("--spec", dest="scene")
    p.add_argument("--report", required=True)

    p = add("run", _cmd_run, "Run every stage in order, skipping those already up to date.")
    p.add_argument("--workdir")
    p.add_argument("--mode", choices=("batch", "stream"))
    p.add_argument("--source", choices=("simulate", "flow", "corpus"))
    p.add_argument("--seed", type=int, help="scene seed")
    p.add_argument("--sweeps", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--force", action="store_true", help="re-run stages that are up to date")
    p.add_argument("--only", nargs="+", metavar="STAGE", help="run only these stages")
    p.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (value parsed as JSON when possible)")
    return parser


# -- helpers --------------------------------------------------------------------


_NOT_CONFIG = {"command", "func", "config", "verbose", "out", "include_train", "assignments",
               "force", "only", "pred", "events", "report", "truth"}


def _config(args) -> pl.PipelineConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    return pl.load_config(args.config, overrides)


def _path(args, cfg: pl.PipelineConfig, key: str) -> Path:
    """A path flag as given, else the config's path (relative to its workdir)."""
    value = getattr(args, key, None)
    if value is not None:
        return Path(value)
    return cfg.path(key)


def _inputs(stage: str, *paths) -> list[str]:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise DataError(f"{stage}: missing input {p}")
    return [pl.stored_hash(p) or "" for p in paths if p is not None]


def _hash(cfg, keys, upstream) -> str:
    return pl.config_hash(cfg, keys, upstream)


# -- subcommands ----------------------------------------------------------------


def _cmd_quantize(args):
    cfg = _config(args)
    h = _hash(cfg, pl._QUANT_KEYS, [])
    pl.quantize(args.flow_dir, args.out, cfg.cell_size, cfg.flow_threshold, cfg.clip_frames, h)


def _cmd_learn_activities(args):
    cfg = _config(args)
    corpus = _path(args, cfg, "corpus")
    h = _hash(cfg, pl._HDP_KEYS, _inputs("learn-activities", corpus))
    pl.learn_activities(corpus, args.out, cfg.hyper(), cfg.n_train, cfg.cutoff, h)


def _cmd_learn_states(args):
    cfg = _config(args)
    corpus = _path(args, cfg, "corpus")
    h = _hash(cfg, pl._HDP_KEYS, _inputs("learn-states", corpus))
    pl.learn_states(corpus, args.out, cfg.hyper(), cfg.n_train, cfg.cutoff, h)


def _cmd_featurize(args):
    cfg = _config(args)
    corpus, act = _path(args, cfg, "corpus"), _path(args, cfg, "activities")
    states = Path(args.states) if args.states else None
    h = _hash(cfg, ("word_cutoff",), _inputs("featurize", corpus, act, states))
    pl.featurize(corpus, act, args.out, states, cfg.word_cutoff, h)


def _cmd_train_gp(args):
    cfg = _config(args)
    feats = _path(args, cfg, "features")
    h = _hash(cfg, ("kernel", "optimize", "gp_max_iter"), _inputs("train-gp", feats))
    pl.train_gp(feats, args.out, cfg.kernel, cfg.optimize, cfg.gp_max_iter, h)


def _cmd_train_regressors(args):
    cfg = _config(args)
    feats = _path(args, cfg, "features")
    h = _hash(cfg, ("optimize", "gp_max_iter"), _inputs("train-regressors", feats))
    pl.train_regressors(feats, args.out, cfg.optimize, cfg.gp_max_iter, h)


def _cmd_classify(args):
    cfg = _config(args)
    feats, gp, states = (_path(args, cfg, k) for k in ("features", "gp", "states"))
    h = _hash(cfg, ("beta",), _inputs("classify", feats, gp, states))
    pl.classify(feats, gp, states, args.out, cfg.beta, args.include_train, h)


def _cmd_detect(args):
    cfg = _config(args)
    paths = [_path(args, cfg, k) for k in ("features", "corpus", "gp", "gpr", "states")]
    h = _hash(cfg, ("beta", "th_rare", "th_trans"), _inputs("detect", *paths))
    events = pl.detect(*paths, args.out, cfg.beta, cfg.thresholds(), args.include_train, h)
    log.info("detect: %d events", len(events))


def _read_scene(path) -> dict | None:
    if path is None:
        return None
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read scene {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from None


def _cmd_simulate(args):
    cfg = _config(args)
    scene = _read_scene(args.scene if args.scene else (cfg.path("scene") if cfg.scene else None))
    h = _hash(cfg, pl._SIM_KEYS, [])
    pl.simulate(scene, cfg.seed, args.out, args.truth, cfg.n_train, cfg.inject_per_kind, h)


def _cmd_evaluate(args):
    scene = _read_scene(args.scene)
    h = pl.config_hash(pl.PipelineConfig(), (), _inputs("evaluate", args.pred, args.truth, args.events))
    doc = pl.evaluate_run(args.pred, args.truth, args.events, args.report, args.activities, scene, h)
    log.info("evaluate: accuracy %.3f", doc["accuracy"])


def _parse_assignments(items) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise DataError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key.replace("-", "_")] = json.loads(value)
        except ValueError:
            out[key.replace("-", "_")] = value
    return out


def _cmd_run(args):
    overrides = _parse_assignments(args.assignments)
    for key in ("workdir", "mode", "source", "seed", "sweeps", "burnin", "beta"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    cfg = pl.load_config(args.config, overrides)
    status = pl.run_pipeline(cfg, force=args.force, only=args.only)
    for name, what in status.items():
        print(f"{name}: {what}")
    report = cfg.path("report")
    if "evaluate" in status and report.exists():
        print(pl.summary_line(report))


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING if verbose <= 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        args.func(args)
    except pl.StageError as exc:
        print(f"hdpgp: {exc}", file=sys.stderr)
        if isinstance(exc.cause, NumericalError):
            return EXIT_NUMERICAL
        if isinstance(exc.cause, (DataError, OSError)):
            return EXIT_DATA
        raise
    except DataError as exc:
        print(f"hdpgp: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"hdpgp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"hdpgp: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
