"""Pipeline stages plus the runner that chains them for the command line.

Every stage is a plain function from input paths to output paths.  The
runner (:func:`run_pipeline`) chains them in dependency order and skips a
stage when its outputs are newer than its inputs and carry the same config
hash.  A stage's hash covers the config keys it reads plus the hashes stored
in its input files, so changing the fusion weight re-runs classification but
not the samplers.

Outputs are written to ``<name>.partial`` and renamed when the stage
succeeds; a failed stage leaves its ``.partial`` files behind for inspection.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from hdpgp.anomaly import (
    EVENTS_SCHEMA,
    AnomalyDetector,
    AnomalyThresholds,
    detect_all,
    load_events,
    save_events,
    train_conflict_regressors,
)
from hdpgp.codebook import (
    Corpus,
    GridSpec,
    grid_from_header,
    iter_corpus,
    load_corpus,
    quantize_flow,
    read_flo,
    save_corpus,
    segment_clips,
)
from hdpgp.errors import DataError
from hdpgp.fusion import FusionConfig, StreamFuser, fuse_sequence
from hdpgp.gp.io import load_gp, load_regressors, save_gp, save_regressors
from hdpgp.gp.laplace import GpMulticlass, fit_multiclass, predict_multiclass
from hdpgp.hdp import HdpHyperParams, fit_hdp, load_activities, save_activities
from hdpgp.hdphmm import fit_hdphmm, load_states, save_states
from hdpgp.representation import (
    WordSetIndex,
    feature_to_json,
    features_header,
    load_features,
    word_sets_for,
    word_sets_from_header,
)
from hdpgp.synth import (
    default_scene,
    evaluate,
    generate,
    inject_anomalies,
    load_truth,
    match_topics,
    plan_injections,
    save_truth,
    scene_from_dict,
)

log = logging.getLogger(__name__)

LABELS_SCHEMA = "labels/1"
REPORT_SCHEMA = "report/1"


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the pipeline; paths are relative to ``workdir``."""

    workdir: str = "."
    mode: str = "batch"
    source: str = "simulate"  # simulate | flow | corpus
    # inputs and artifacts
    corpus: str = "corpus.jsonl"
    scene: str | None = None
    flow_dir: str | None = None
    truth: str = "truth.json"
    activities: str = "activities.json"
    states: str = "states.json"
    features: str = "features.jsonl"
    gp: str = "gp.json"
    gpr: str = "gpr.json"
    labels: str = "labels.jsonl"
    anomalies: str = "anomalies.jsonl"
    report: str = "report.json"
    # simulation
    seed: int = 0
    inject_per_kind: int = 10
    # quantization
    cell_size: int = 8
    flow_threshold: float = 1.0
    clip_frames: int = 75
    # learning
    n_train: int = 500
    gamma: float = 2.0
    alpha: float = 0.5
    d0: float = 0.01
    sweeps: int = 1000
    burnin: int = 500
    sampler_seed: int = 0
    cutoff: float = 0.99
    word_cutoff: float = 0.9
    kernel: str = "ard"
    optimize: bool = True
    gp_max_iter: int = 100
    # classification and detection
    beta: float = 0.1
    th_rare: int = 50
    th_trans: float = 0.05

    def __post_init__(self):
        if self.mode not in ("batch", "stream"):
            raise DataError(f"mode must be 'batch' or 'stream', got {self.mode!r}")
        if self.source not in ("simulate", "flow", "corpus"):
            raise DataError(f"source must be simulate, flow or corpus, got {self.source!r}")
        if self.source == "flow" and not self.flow_dir:
            raise DataError("source 'flow' needs flow_dir")
        if self.n_train < 1:
            raise DataError(f"n_train must be >= 1, got {self.n_train}")
        if self.kernel not in ("ard", "rbf"):
            raise DataError(f"kernel must be 'ard' or 'rbf', got {self.kernel!r}")
        if not 0 < self.cutoff <= 1 or not 0 < self.word_cutoff <= 1:
            raise DataError("cutoff and word_cutoff must lie in (0, 1]")
        self.hyper()
        self.thresholds()
        self.fusion()

    def hyper(self) -> HdpHyperParams:
        return HdpHyperParams(self.gamma, self.alpha, self.d0, self.sweeps, self.burnin, self.sampler_seed)

    def thresholds(self) -> AnomalyThresholds:
        return AnomalyThresholds(self.th_rare, self.th_trans)

    def fusion(self) -> FusionConfig:
        return FusionConfig(self.beta)

    def path(self, name: str) -> Path:
        value = getattr(self, name)
        p = Path(value)
        return p if p.is_absolute() else Path(self.workdir) / p


CONFIG_KEYS = {f.name for f in fields(PipelineConfig)}


def _parse_config_text(text: str, suffix: str) -> dict:
    if suffix == ".json":
        return json.loads(text)
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)


def _flatten(doc: dict) -> dict:
    """Tables are namespaces only: ``[hdp] gamma = 1`` sets ``gamma``."""
    out = {}
    for k, v in doc.items():
        if isinstance(v, dict):
            out.update(_flatten(v))
        else:
            out[k.replace("-", "_")] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the TOML/JSON file, then ``overrides`` (command-line flags win).

    A relative ``workdir`` in the file is taken relative to the file.
    """
    values: dict = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            values = _flatten(_parse_config_text(text, path.suffix.lower()))
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
        if "workdir" in values and not Path(values["workdir"]).is_absolute():
            values["workdir"] = str(path.parent / values["workdir"])
        elif "workdir" not in values:
            values["workdir"] = str(path.parent)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    unknown = sorted(set(values) - CONFIG_KEYS)
    if unknown:
        raise DataError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise DataError(str(exc)) from None


def config_hash(cfg: PipelineConfig, keys: Sequence[str] | None = None, upstream: Sequence[str] = ()) -> str:
    """Stable short hash of the chosen config values and upstream hashes."""
    doc = asdict(cfg)
    if keys is not None:
        doc = {k: doc[k] for k in sorted(keys)}
    doc = {"config": doc, "upstream": list(upstream)}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def stored_hash(path) -> str | None:
    """The ``config_hash`` recorded in the first JSON line of an output file."""
    try:
        with open(path) as fh:
            first = fh.readline()
            try:
                doc = json.loads(first)
            except ValueError:  # an indented JSON document
                fh.seek(0)
                doc = json.load(fh)
    except (OSError, ValueError):
        return None
    return doc.get("config_hash") if isinstance(doc, dict) else None


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DataError(f"{stage}: missing input {path}")
    return path


# -- stages ---------------------------------------------------------------------


def simulate(scene: dict | None, seed: int, out_corpus, out_truth, n_train: int = 500,
             inject_per_kind: int = 10, config_hash: str | None = None):
    """Generate a synthetic scene and inject anomalies into the clips after ``n_train``."""
    doc = dict(scene or {})
    doc["seed"] = seed
    spec = scene_from_dict(doc) if scene else default_scene(seed=seed)
    corpus, gt = generate(spec)
    if inject_per_kind > 0:
        if n_train >= len(corpus):
            raise DataError(f"no test clips to inject into: {len(corpus)} clips, n_train {n_train}")
        plan = plan_injections(gt[n_train:], inject_per_kind, seed=seed)
        corpus, gt = inject_anomalies(corpus, gt, plan, spec)
    save_corpus(corpus, out_corpus, config_hash)
    save_truth(gt, out_truth, config_hash)
    return spec, corpus, gt


def quantize(flow_dir, out, cell_size: int = 8, threshold: float = 1.0, clip_frames: int = 75,
             config_hash: str | None = None) -> Corpus:
    """Quantize the ``.flo`` files of a directory (sorted by name) into a clip corpus."""
    files = sorted(Path(flow_dir).glob("*.flo"))
    if not files:
        raise DataError(f"no .flo files in {flow_dir}")
    first = read_flo(files[0])
    grid = GridSpec(first.width, first.height, cell_size, 8, threshold)
    frames = (quantize_flow(read_flo(f) if i else first, grid) for i, f in enumerate(files))
    corpus = segment_clips(frames, clip_frames, grid)
    save_corpus(corpus, out, config_hash)
    log.info("quantize: %d frames -> %d clips", len(files), len(corpus))
    return corpus


def _train_part(corpus: Corpus, n_train: int) -> Corpus:
    if len(corpus) < n_train:
        log.warning("corpus has %d clips, fewer than n_train=%d; training on all", len(corpus), n_train)
    return corpus[:n_train]


def learn_activities(corpus_path, out, hyper: HdpHyperParams, n_train: int = 500, cutoff: float = 0.99,
                     config_hash: str | None = None):
    train = _train_part(load_corpus(corpus_path), n_train)
    model = fit_hdp(train, hyper, cutoff)
    save_activities(model, out, config_hash)
    log.info("learn-activities: %d activities, %d typical", model.K, len(model.typical))
    return model


def learn_states(corpus_path, out, hyper: HdpHyperParams, n_train: int = 500, cutoff: float = 0.99,
                 config_hash: str | None = None):
    train = _train_part(load_corpus(corpus_path), n_train)
    model = fit_hdphmm(train, hyper, cutoff)
    save_states(model, out, config_hash)
    log.info("learn-states: %d states, typical %s", model.L, list(model.typical))
    return model


def featurize(corpus_path, activities_path, out, states_path=None, word_cutoff: float = 0.9,
              config_hash: str | None = None) -> int:
    """Coverage features of every clip.

    With a state model, the first ``len(state_seq)`` clips are the training
    clips: they are labelled with their learned state when it is typical and
    left unlabelled otherwise.  The header records that count as ``n_train``.
    """
    act = load_activities(activities_path)
    header, clips = iter_corpus(corpus_path)
    word_sets = word_sets_for(act, word_cutoff)
    V = act.codebook_size
    index = WordSetIndex(word_sets, V)
    seq, typical = np.zeros(0, dtype=np.int64), set()
    if states_path is not None:
        st = load_states(states_path)
        seq, typical = st.state_seq, set(st.typical)
    doc = features_header(word_sets, V, config_hash)
    doc["n_train"] = int(seq.size)
    n = 0
    with open(out, "w") as fh:
        fh.write(json.dumps(doc) + "\n")
        for t, clip in enumerate(clips):
            label = int(seq[t]) if t < seq.size and int(seq[t]) in typical else None
            fh.write(json.dumps(feature_to_json(index.feature(clip), label)) + "\n")
            n += 1
    if n < seq.size:
        raise DataError(f"featurize: corpus has {n} clips, the state model was trained on {seq.size}")
    return n


def _training_rows(features_path):
    header, feats, labels = load_features(features_path)
    n_train = int(header.get("n_train", 0))
    rows = [(f, y) for f, y in zip(feats[:n_train], labels[:n_train]) if y is not None]
    if not rows:
        raise DataError(f"{features_path}: no labelled training clips")
    return header, rows


def train_gp(features_path, out, kernel: str = "ard", optimize: bool = True, max_iter: int = 100,
             config_hash: str | None = None) -> GpMulticlass:
    _, rows = _training_rows(features_path)
    X = np.array([f.c for f, _ in rows])
    y = np.array([lab for _, lab in rows], dtype=np.int64)
    model = fit_multiclass(X, y, kernel, optimize, max_iter)
    save_gp(model, out, config_hash)
    return model


def train_regressors(features_path, out, optimize: bool = True, max_iter: int = 100,
                     config_hash: str | None = None):
    """Conflict regressors from the training clips labelled with a typical state."""
    _, rows = _training_rows(features_path)
    X = np.array([f.c for f, _ in rows])
    regs = train_conflict_regressors(X, [f.n_words for f, _ in rows], optimize, max_iter)
    save_regressors(list(enumerate(regs)), out, config_hash)
    return regs


def _test_rows(features_path, include_train: bool = False):
    header, feats, _ = load_features(features_path)
    start = 0 if include_train else int(header.get("n_train", 0))
    return header, feats[start:]


def _check_classes(gp: GpMulticlass, M):
    L = np.asarray(M).shape[0]
    if max(gp.classes) >= L:
        raise DataError(f"classifier class {max(gp.classes)} outside the {L}-state transition matrix")


def _probabilities(gp: GpMulticlass, feats) -> np.ndarray:
    """Class probabilities clip by clip.

    Scoring one row at a time keeps batch output bit-identical to the
    streaming path (a blocked matrix product can round differently).
    """
    P = np.zeros((len(feats), len(gp.classes)))
    for t, f in enumerate(feats):
        P[t] = predict_multiclass(gp, f.c[None, :])[0]
    return P


def _labels_header(gp: GpMulticlass, beta: float, config_hash):
    return {"schema": LABELS_SCHEMA, "classes": list(gp.classes), "beta": beta, "config_hash": config_hash}


def _label_row(clip_id, p, label, e) -> dict:
    return {"clip_id": int(clip_id), "p": [float(x) for x in p], "label": int(label),
            "energies": [float(x) for x in e]}


def classify(features_path, gp_path, states_path, out, beta: float = 0.1, include_train: bool = False,
             config_hash: str | None = None):
    """Fused labels of the test clips (all clips with ``include_train``)."""
    gp = load_gp(gp_path)
    st = load_states(states_path)
    _check_classes(gp, st.transition)
    _, feats = _test_rows(features_path, include_train)
    t0 = time.perf_counter()
    P = _probabilities(gp, feats)
    labels, E = fuse_sequence(P, st.transition, gp.classes, FusionConfig(beta))
    _throughput("classify", len(feats), time.perf_counter() - t0)
    with open(out, "w") as fh:
        fh.write(json.dumps(_labels_header(gp, beta, config_hash)) + "\n")
        for f, p, lab, e in zip(feats, P, labels, E):
            fh.write(json.dumps(_label_row(f.clip_id, p, lab, e)) + "\n")
    return labels, P


def load_labels(path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    try:
        docs = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not docs or docs[0].get("schema") != LABELS_SCHEMA:
        raise DataError(f"{path}: expected schema {LABELS_SCHEMA!r}")
    return docs[0], docs[1:]


def _throughput(stage: str, n: int, seconds: float) -> None:
    rate = n / seconds if seconds > 0 else float("inf")
    log.info("%s: %d clips in %.3f s (%.0f clips/s)", stage, n, seconds, rate)


def detect(features_path, corpus_path, gp_path, gpr_path, states_path, out, beta: float = 0.1,
           th: AnomalyThresholds = AnomalyThresholds(), include_train: bool = False,
           config_hash: str | None = None):
    """Anomaly events of the test clips, using freshly fused labels."""
    header, feats = _test_rows(features_path, include_train)
    gp = load_gp(gp_path)
    st = load_states(states_path)
    _check_classes(gp, st.transition)
    regs = [r for _, r in sorted(load_regressors(gpr_path), key=lambda x: x[0])]
    word_sets = word_sets_from_header(header)
    corpus = load_corpus(corpus_path)
    by_id = {c.clip_id: c for c in corpus.clips}
    missing = [f.clip_id for f in feats if f.clip_id not in by_id]
    if missing:
        raise DataError(f"detect: clip {missing[0]} of the features is not in {corpus_path}")
    clips = [by_id[f.clip_id] for f in feats]
    t0 = time.perf_counter()
    P = _probabilities(gp, feats)
    labels, _ = fuse_sequence(P, st.transition, gp.classes, FusionConfig(beta))
    events = detect_all(clips, feats, labels, corpus.grid, word_sets, regs, st.transition, th)
    _throughput("detect", len(feats), time.perf_counter() - t0)
    save_events(out, events, config_hash)
    return events


def stream(corpus_path, activities_path, gp_path, gpr_path, states_path, out_labels, out_events,
           n_skip: int = 0, word_cutoff: float = 0.9, beta: float = 0.1,
           th: AnomalyThresholds = AnomalyThresholds(), labels_hash: str | None = None,
           events_hash: str | None = None, on_clip: Callable | None = None) -> int:
    """Clip-by-clip classification and detection straight from the corpus file.

    Each clip is featurized, classified, fused and checked as soon as its line
    is read, and both output lines are flushed before the next clip.  The
    first ``n_skip`` clips (the training part) are passed over.
    """
    act = load_activities(activities_path)
    gp = load_gp(gp_path)
    st = load_states(states_path)
    _check_classes(gp, st.transition)
    regs = [r for _, r in sorted(load_regressors(gpr_path), key=lambda x: x[0])]
    word_sets = word_sets_for(act, word_cutoff)
    index = WordSetIndex(word_sets, act.codebook_size)
    header, clips = iter_corpus(corpus_path)
    grid = grid_from_header(header)
    fuser = StreamFuser(st.transition, gp.classes, FusionConfig(beta))
    detector = AnomalyDetector(grid, word_sets, regs, st.transition, th)
    n = 0
    t0 = time.perf_counter()
    with open(out_labels, "w") as fl, open(out_events, "w") as fe:
        fl.write(json.dumps(_labels_header(gp, beta, labels_hash)) + "\n")
        fe.write(json.dumps({"schema": EVENTS_SCHEMA, "config_hash": events_hash}) + "\n")
        for t, clip in enumerate(clips):
            if t < n_skip:
                continue
            feat = index.feature(clip)
            p = predict_multiclass(gp, feat.c[None, :])[0]
            label, e = fuser(p)
            events = detector(clip, feat, label)
            fl.write(json.dumps(_label_row(clip.clip_id, p, label, e)) + "\n")
            for ev in events:
                fe.write(json.dumps(ev.to_json()) + "\n")
            fl.flush()
            fe.flush()
            n += 1
            if on_clip is not None:
                on_clip(clip.clip_id, label, events)
    _throughput("stream", n, time.perf_counter() - t0)
    return n


def evaluate_run(labels_path, truth_path, events_path, out, activities_path=None, scene: dict | None = None,
                 config_hash: str | None = None) -> dict:
    """Score fused labels and events against the ground truth of the same clips."""
    _, rows = load_labels(labels_path)
    gt = load_truth(truth_path)
    ids = [r["clip_id"] for r in rows]
    if not ids:
        raise DataError(f"{labels_path}: no labelled clips to evaluate")
    sub = gt.select(ids)
    events = load_events(events_path) if events_path is not None else None
    rep = evaluate(np.array([r["label"] for r in rows]), sub, events)
    if activities_path is not None and scene is not None:
        act = load_activities(activities_path)
        spec = scene_from_dict(scene)
        planted = np.array([a.dense(spec.grid.codebook_size) for a in spec.activities])
        rep.topic_matching = [
            {"planted": int(j), "learned": int(act.typical[i]), "cosine": float(c)}
            for j, i, c in match_topics(act.typical_phi(), planted)
        ]
    doc = {"schema": REPORT_SCHEMA, "config_hash": config_hash, **rep.to_dict()}
    with open(out, "w") as fh:
        json.dump(doc, fh, indent=1)
    return doc


# -- runner ---------------------------------------------------------------------


@dataclass
class Stage:
    name: str
    inputs: list
    outputs: list
    keys: tuple
    action: Callable  # action(hash, *partial_outputs)


def _fresh(stage: Stage, h: str) -> bool:
    if not all(p.exists() for p in stage.outputs):
        return False
    if any(stored_hash(p) != h for p in stage.outputs):
        return False
    newest_in = max((p.stat().st_mtime for p in stage.inputs if p.exists()), default=0.0)
    return min(p.stat().st_mtime for p in stage.outputs) >= newest_in


def _partial(p: Path) -> Path:
    return p.with_name(p.name + ".partial")


_SIM_KEYS = ("source", "scene", "seed", "inject_per_kind", "n_train")
_QUANT_KEYS = ("source", "flow_dir", "cell_size", "flow_threshold", "clip_frames")
_HDP_KEYS = ("n_train", "gamma", "alpha", "d0", "sweeps", "burnin", "sampler_seed", "cutoff")


def _scene_doc(cfg: PipelineConfig) -> dict | None:
    if cfg.scene is None:
        return None
    path = cfg.path("scene")
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read scene {path}: {exc}") from None


def build_stages(cfg: PipelineConfig) -> list[Stage]:
    P = cfg.path
    th = cfg.thresholds()
    stages = []
    if cfg.source == "simulate":
        scene = _scene_doc(cfg)
        ins = [P("scene")] if cfg.scene else []
        stages.append(Stage("simulate", ins, [P("corpus"), P("truth")], _SIM_KEYS,
                            lambda h, c, t: simulate(scene, cfg.seed, c, t, cfg.n_train, cfg.inject_per_kind, h)))
    elif cfg.source == "flow":
        stages.append(Stage("quantize", [], [P("corpus")], _QUANT_KEYS,
                            lambda h, c: quantize(P("flow_dir"), c, cfg.cell_size, cfg.flow_threshold,
                                                  cfg.clip_frames, h)))
    stages += [
        Stage("learn-activities", [P("corpus")], [P("activities")], _HDP_KEYS,
              lambda h, o: learn_activities(P("corpus"), o, cfg.hyper(), cfg.n_train, cfg.cutoff, h)),
        Stage("learn-states", [P("corpus")], [P("states")], _HDP_KEYS,
              lambda h, o: learn_states(P("corpus"), o, cfg.hyper(), cfg.n_train, cfg.cutoff, h)),
        Stage("featurize", [P("corpus"), P("activities"), P("states")], [P("features")], ("word_cutoff",),
              lambda h, o: featurize(P("corpus"), P("activities"), o, P("states"), cfg.word_cutoff, h)),
        Stage("train-gp", [P("features")], [P("gp")], ("kernel", "optimize", "gp_max_iter"),
              lambda h, o: train_gp(P("features"), o, cfg.kernel, cfg.optimize, cfg.gp_max_iter, h)),
        Stage("train-regressors", [P("features")], [P("gpr")], ("optimize", "gp_max_iter"),
              lambda h, o: train_regressors(P("features"), o, cfg.optimize, cfg.gp_max_iter, h)),
    ]
    if cfg.mode == "batch":
        stages += [
            Stage("classify", [P("features"), P("gp"), P("states")], [P("labels")], ("beta",),
                  lambda h, o: classify(P("features"), P("gp"), P("states"), o, cfg.beta, config_hash=h)),
            Stage("detect", [P("features"), P("corpus"), P("gp"), P("gpr"), P("states")], [P("anomalies")],
                  ("beta", "th_rare", "th_trans"),
                  lambda h, o: detect(P("features"), P("corpus"), P("gp"), P("gpr"), P("states"), o,
                                      cfg.beta, th, config_hash=h)),
        ]
    else:
        def _stream(h, lab, ev):
            n_skip = len(load_states(P("states")).state_seq)
            stream(P("corpus"), P("activities"), P("gp"), P("gpr"), P("states"), lab, ev, n_skip,
                   cfg.word_cutoff, cfg.beta, th, h, h)

        stages.append(Stage("stream", [P("corpus"), P("activities"), P("gp"), P("gpr"), P("states")],
                            [P("labels"), P("anomalies")], ("word_cutoff", "beta", "th_rare", "th_trans"),
                            _stream))
    if cfg.source == "simulate":
        scene = _scene_doc(cfg) or {"seed": cfg.seed}
        scene.setdefault("seed", cfg.seed)
        stages.append(Stage("evaluate", [P("labels"), P("truth"), P("anomalies"), P("activities")], [P("report")],
                            (), lambda h, o: evaluate_run(P("labels"), P("truth"), P("anomalies"), o,
                                                          P("activities"), scene, h)))
    return stages


class StageError(Exception):
    """A pipeline stage failed; ``cause`` is the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def run_pipeline(cfg: PipelineConfig, force: bool = False, only: Sequence[str] | None = None) -> dict:
    """Run the stages in order; returns ``{stage: "ran" | "skipped"}``."""
    Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    status = {}
    for stage in build_stages(cfg):
        if only is not None and stage.name not in only:
            continue
        upstream = []
        for p in stage.inputs:
            if stage.name != "simulate":
                _need(p, stage.name)
            upstream.append(stored_hash(p) or "")
        h = config_hash(cfg, stage.keys, upstream)
        if not force and _fresh(stage, h):
            log.info("%s: up to date, skipped", stage.name)
            status[stage.name] = "skipped"
            continue
        partial = [_partial(p) for p in stage.outputs]
        t0 = time.perf_counter()
        try:
            stage.action(h, *partial)
        except Exception as exc:
            left = [str(p) for p in partial if p.exists()]
            if left:
                log.error("%s: partial outputs left at %s", stage.name, ", ".join(left))
            raise StageError(stage.name, exc) from exc
        for tmp, final in zip(partial, stage.outputs):
            os.replace(tmp, final)
        log.info("%s: done in %.2f s", stage.name, time.perf_counter() - t0)
        status[stage.name] = "ran"
    return status


def summary_line(report_path) -> str:
    with open(report_path) as fh:
        doc = json.load(fh)
    parts = [f"accuracy {doc['accuracy']:.3f}"]
    if doc.get("tpr") is not None:
        parts.append(f"TPR {doc['tpr']:.3f}")
    if doc.get("fpr") is not None:
        parts.append(f"FPR {doc['fpr']:.3f}")
    return ", ".join(parts)


def with_overrides(cfg: PipelineConfig, **kw) -> PipelineConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
