"""``fewbit`` command line: one subcommand per experiment step.

Every subcommand reads an optional YAML/JSON config (``--config``), lets
flags override its keys, resolves the seed (flag, then config, then the
``FEATCOMP_SEED`` environment variable) and writes a manifest next to its
outputs.  Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__, tinydata
from .report import Report, export_report

log = logging.getLogger("fewbit")

SEED_ENV = "FEATCOMP_SEED"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SEEDLESS = {"kanon", "supsize"}  # deterministic without any random stream


class UsageError(Exception):
    """Bad flags or config; exit code 1."""


class RuntimeFailure(Exception):
    """Valid request that could not be completed; exit code 2."""


# -- key schemas -------------------------------------------------------------------

def _bits(value):
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "floats", "")):
        return None
    value = int(value)
    if value < 1:
        raise ValueError("must be >= 1 or none")
    return value


def _bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _int_list(value):
    if isinstance(value, str):
        value = [v for v in value.replace(",", " ").split() if v]
    if isinstance(value, int):
        value = [value]
    return [int(v) for v in value]


def _str_list(value):
    if isinstance(value, str):
        value = [v for v in value.replace(",", " ").split() if v]
    return [str(v) for v in value]


def _opt_str(value):
    return None if value is None else str(value)


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    help: str = ""


COMMON = {
    "seed": Key(int, None, "master seed (falls back to $FEATCOMP_SEED)"),
    "precision": Key(str, "float32", "float32 or float64"),
}

TRAIN_KEYS = {
    "data": Key(_opt_str, None, "directory holding train.toyv / eval.toyv (default: generate)"),
    "task": Key(str, "motion", "motion, shape or all"),
    "n_bits": Key(_bits, 10, "bottleneck width; 'none' for the float baseline"),
    "objective": Key(str, "task", "task, r_only or task_plus_r"),
    "q_only": Key(_bool, False, "zero the visual input"),
    "epochs": Key(int, 3, ""),
    "batch_size": Key(int, 32, ""),
    "lr_featcomp": Key(float, 1e-3, ""),
    "lr_task_model": Key(float, 1e-4, ""),
    "lr_backbone": Key(float, 1e-3, ""),
    "train_backbone": Key(_bool, True, ""),
    "recon_weight": Key(float, 1.0, ""),
    "count": Key(int, 4000, "training videos when generating data"),
    "eval_count": Key(int, 1000, "evaluation videos when generating data"),
    "noise": Key(float, 0.1, "pixel noise when generating data"),
}

SCHEMAS = {
    "gen-data": {
        "count": Key(int, 4000, "training videos"),
        "eval_count": Key(int, 1000, "evaluation videos"),
        "noise": Key(float, 0.1, "pixel noise sigma"),
        "onset": Key(int, 0, "hide the object before this frame"),
        "task": Key(str, "all", "QA task filter for the written QA files"),
    },
    "train": TRAIN_KEYS,
    "sweep": {**TRAIN_KEYS,
              "levels": Key(_int_list, [1, 2, 4, 10, 100, 1000], "bit levels"),
              "seeds": Key(_int_list, None, "run seeds (default: seed, seed+1, seed+2)"),
              "jobs": Key(int, 1, "parallel worker processes")},
    "transfer": {**TRAIN_KEYS,
                 "tasks": Key(_str_list, ["motion", "shape"], "source/target tasks"),
                 "source": Key(_opt_str, None, "single source task (with --target)"),
                 "target": Key(_opt_str, None, "single target task (with --source)")},
    "pack": {
        "model": Key(_opt_str, None, "FewBitVideoQA model file; codes are extracted from --data"),
        "data": Key(_opt_str, None, "data directory (with --model)"),
        "split": Key(str, "train", "train or eval"),
        "items": Key(int, 72000, "synthetic codes: item count"),
        "bits": Key(int, 10, "synthetic codes: bits per item"),
        "labels": Key(_bool, False, "append answer labels"),
        "task": Key(str, "motion", "task for --labels"),
    },
    "sizes": {
        "items": Key(int, 72000, ""),
        "dims": Key(int, 2048, "floats per item"),
        "n_bits": Key(int, 10, ""),
        "codec": Key(str, "deflate", "deflate or bzip2"),
        "model": Key(_opt_str, None, "take the float buffer from this model's features"),
        "data": Key(_opt_str, None, "data directory (with --model)"),
    },
    "supsize": {
        "qa": Key(_opt_str, None, "QA text file (default: train.qa.tsv in --data)"),
        "data": Key(_opt_str, None, "data directory"),
        "num_videos": Key(int, None, "default: distinct video ids in the QA file"),
        "codec": Key(str, "bzip2", "deflate or bzip2"),
    },
    "invert": {
        "n_bits": Key(_bits, None, "face net bottleneck; 'none' attacks the 40 hidden floats"),
        "identities": Key(int, 10, "attack one image of each of the first k identities"),
        "steps": Key(int, 300, ""),
        "step_size": Key(float, 0.05, "pixel units"),
        "init": Key(str, "gray", "gray or uniform"),
        "tv_weight": Key(float, 0.0, ""),
        "target_layer": Key(_opt_str, None, "pre_final_linear (default) or post_binarizer"),
        "quantize": Key(float, None, "round float targets to this granularity"),
        "gate": Key(float, 0.975, "minimum face-net train accuracy"),
    },
    "kanon": {
        "n_users": Key(int, None, "expected-k mode: number of users"),
        "bits": Key(int, None, "expected-k mode: stored bits"),
        "codes": Key(_opt_str, None, "TINY file with stored codes"),
        "truncate": Key(int, None, "k_min for prefix truncation"),
    },
    "bam": {
        "model": Key(_opt_str, None, "FewBitVideoQA model file"),
        "data": Key(_opt_str, None, "data directory"),
        "split": Key(str, "eval", "train or eval"),
        "videos": Key(_int_list, [0], "video indices"),
    },
    "words": {
        "model": Key(_opt_str, None, "FewBitVideoQA model file"),
        "data": Key(_opt_str, None, "data directory"),
        "task": Key(str, "all", "QA task whose vocabulary is analysed"),
        "top_k": Key(int, 7, ""),
    },
    "gradcheck": {
        "tolerance": Key(float, 1e-4, "layer tolerance"),
        "pipeline_tolerance": Key(float, 1e-3, "full pipeline tolerance"),
    },
}

HELP = {
    "gen-data": "generate toy train/eval videos and QA files",
    "train": "train one model and report its eval accuracy",
    "sweep": "bit-level sweep with Floats / Q-only / Random baselines",
    "transfer": "task-specificity matrix from stored codes",
    "pack": "write a tiny dataset (TINY container)",
    "sizes": "storage sizes: packed codes vs raw and coded floats",
    "supsize": "supervision size of the QA text in bits per video",
    "invert": "feature-inversion attack on the face net",
    "kanon": "k-anonymity: expected k, empirical buckets, prefix truncation",
    "bam": "bit activation maps as PGM heat maps",
    "words": "nearest words in mean-code space",
    "gradcheck": "finite-difference check of every layer and the pipeline",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fewbit", description="Few-bit feature compression experiments.")
    parser.add_argument("--version", action="version", version=f"fewbit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="YAML or JSON file of keys")
        p.add_argument("--out", default=".", help="output directory (default: .)")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, spec in {**COMMON, **schema}.items():
            default = f" (default: {spec.default})" if spec.default is not None else ""
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE",
                           help=(spec.help + default).strip())
    return parser


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML/JSON: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a mapping of keys")
    return {str(k).replace("-", "_"): v for k, v in doc.items()}


def resolve(command: str, args: argparse.Namespace, env=None) -> dict:
    """Defaults < config file < flags; seed falls back to the environment."""
    env = os.environ if env is None else env
    schema = {**COMMON, **SCHEMAS[command]}
    config = load_config(args.config)
    unknown = sorted(set(config) - set(schema))
    if unknown:
        raise UsageError(f"unknown config key {unknown[0]!r} for {command}"
                         + (f" (also: {', '.join(unknown[1:])})" if len(unknown) > 1 else ""))
    resolved = {}
    for key, spec in schema.items():
        flag = getattr(args, key, None)
        raw = flag if flag is not None else config.get(key, spec.default)
        if key == "seed" and raw is None:
            raw = env.get(SEED_ENV)
            if raw is None and command not in SEEDLESS:
                raise UsageError(f"missing required key 'seed' (pass --seed, set it in the config, "
                                 f"or export {SEED_ENV})")
        try:
            resolved[key] = None if raw is None else spec.parse(raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for key {key!r}: {raw!r} ({exc})") from None
    if resolved["precision"] not in ("float32", "float64"):
        raise UsageError("key 'precision' must be float32 or float64")
    return resolved


def write_manifest(out: Path, command: str, cfg: dict, outputs) -> Path:
    path = out / f"manifest-{command}.json"
    doc = {"tool": "fewbit", "version": __version__, "command": command, "seed": cfg["seed"],
           "config": cfg, "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_json(path: Path, doc) -> Path:
    from .report import _json_safe

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_json_safe(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# -- shared loaders ----------------------------------------------------------------

def _require_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise RuntimeFailure(f"missing input file: expected {path}")
    return path


def _load_data(directory):
    from .tasks import load_videos
    from .train import ToyData

    directory = Path(directory)
    return ToyData(load_videos(_require_file(directory / "train.toyv")),
                   load_videos(_require_file(directory / "eval.toyv")))


def _data_for(cfg):
    from .train import make_data

    if cfg.get("data"):
        return _load_data(cfg["data"])
    return make_data(cfg["seed"], cfg.get("count", 4000), cfg.get("eval_count", 1000), cfg.get("noise", 0.1))


def _load_video_model(path):
    from .estimators import FewBitVideoQA, load_model

    if path is None:
        raise UsageError("key 'model' is required")
    model = load_model(_require_file(path))
    if not isinstance(model, FewBitVideoQA):
        raise UsageError(f"{path} holds a {type(model).__name__}, expected FewBitVideoQA")
    return model


def _train_config(cfg):
    from .train import TrainConfig

    try:
        return TrainConfig(seed=cfg["seed"], n_bits=cfg["n_bits"], epochs=cfg["epochs"],
                           batch_size=cfg["batch_size"], lr_featcomp=cfg["lr_featcomp"],
                           lr_task_model=cfg["lr_task_model"], lr_backbone=cfg["lr_backbone"],
                           objective=cfg["objective"], train_backbone=cfg["train_backbone"],
                           recon_weight=cfg["recon_weight"], precision=cfg["precision"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_task(task):
    from .tasks import TASKS

    if task not in TASKS:
        raise UsageError(f"key 'task' must be one of {sorted(TASKS)}, got {task!r}")


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(cfg, out: Path):
    from .tasks import gen_qa, gen_toy_videos, qa_to_text, save_videos

    _check_task(cfg["task"])
    try:
        train = gen_toy_videos(cfg["seed"], cfg["count"], noise=cfg["noise"], onset=cfg["onset"])
        evals = gen_toy_videos(cfg["seed"], cfg["eval_count"], noise=cfg["noise"], onset=cfg["onset"],
                               start_id=cfg["count"], split=1)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    paths = [out / "train.toyv", out / "eval.toyv", out / "train.qa.tsv", out / "eval.qa.tsv"]
    save_videos(paths[0], train)
    save_videos(paths[1], evals)
    for path, vs in ((paths[2], train), (paths[3], evals)):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(qa_to_text(gen_qa(vs, cfg["task"])))
    print(f"wrote {len(train)} train / {len(evals)} eval videos to {out}")
    return paths


def cmd_train(cfg, out: Path):
    from .estimators import save_model
    from .train import (results_report, train_floats_baseline, train_q_only, train_r_only,
                        train_task, train_task_plus_r)

    _check_task(cfg["task"])
    config = _train_config(cfg)
    data = _data_for(cfg)
    if cfg["q_only"]:
        result = train_q_only(config, data, cfg["task"])
    elif config.n_bits is None:
        result = train_floats_baseline(config, data, cfg["task"])
    else:
        fn = {"task": train_task, "r_only": train_r_only, "task_plus_r": train_task_plus_r}[config.objective]
        result = fn(config, data, cfg["task"])
    model_path = out / "model.fcmp"
    save_model(result.model, model_path)
    rep = results_report([result], {"history": result.history})
    paths = [model_path, export_report(rep, out / "report.csv"), export_report(rep, out / "report.json")]
    print(f"{cfg['task']} {result.objective} n_bits={result.n_bits} seed={result.seed}: "
          f"accuracy {result.accuracy:.4f}")
    return paths


def cmd_sweep(cfg, out: Path):
    from .train import bit_sweep

    _check_task(cfg["task"])
    config = _train_config(cfg)
    seeds = cfg["seeds"] if cfg["seeds"] is not None else [config.seed + i for i in range(3)]
    result = bit_sweep(config, _data_for(cfg), cfg["task"], levels=cfg["levels"], seeds=seeds,
                       jobs=max(1, cfg["jobs"]))
    rep = result.report()
    summary = result.summary()
    paths = [export_report(rep, out / "sweep.csv"), export_report(rep, out / "sweep.json"),
             export_report(summary, out / "sweep_summary.csv")]
    for row in summary.rows:
        print(f"{str(row['name']):>8}  {row['mean_accuracy']:.4f}")
    print(f"spearman(bits, accuracy) = {result.spearman:.4f}")
    if result.failures:
        for f in result.failures:
            print(f"failed: {f}", file=sys.stderr)
    return paths


def cmd_transfer(cfg, out: Path):
    from .train import transfer_matrix

    tasks = cfg["tasks"]
    if cfg["source"] or cfg["target"]:
        if not (cfg["source"] and cfg["target"]):
            raise UsageError("keys 'source' and 'target' must be given together")
        tasks = [cfg["source"]] if cfg["source"] == cfg["target"] else [cfg["source"], cfg["target"]]
    for t in tasks:
        _check_task(t)
    config = _train_config(cfg)
    if config.n_bits is None:
        raise UsageError("transfer needs a bottleneck: set n_bits")
    matrix, rep = transfer_matrix(config, _data_for(cfg), tasks)
    if cfg["source"]:
        rep = Report(rep.columns, rep.where(source=cfg["source"], task=cfg["target"]), rep.meta)
    rep.meta["matrix"] = matrix
    paths = [export_report(rep, out / "transfer.csv"), export_report(rep, out / "transfer.json")]
    for row in rep.rows:
        print(f"{row['source']} -> {row['task']}: {row['accuracy']:.4f}")
    return paths


def cmd_pack(cfg, out: Path):
    from .tasks import gen_qa

    labels = None
    if cfg["model"]:
        if not cfg["data"]:
            raise UsageError("key 'data' is required with 'model'")
        model = _load_video_model(cfg["model"])
        data = _load_data(cfg["data"])
        videos = data.train if cfg["split"] == "train" else data.eval
        codes = model.transform(videos.frames)
        if cfg["labels"]:
            _check_task(cfg["task"])
            qa = gen_qa(videos, cfg["task"])
            if len(qa) != len(videos):
                raise UsageError("labels need a single-question task (motion or shape)")
            labels = qa.answers[np.argsort(qa.video_index)]
    else:
        from ._rng import child_rng

        codes = child_rng(cfg["seed"], "data", 7).integers(0, 2, size=(cfg["items"], cfg["bits"]), dtype=np.uint8)
        if cfg["labels"]:
            labels = child_rng(cfg["seed"], "data", 8).integers(0, 9, size=cfg["items"])
    path = out / "codes.tiny"
    blob = tinydata.pack(codes, labels)
    path.write_bytes(blob)
    n, width = codes.shape
    payload = tinydata.payload_size(n, width)
    info = {"items": n, "bits_per_item": width, "payload_bytes": payload, "file_bytes": len(blob),
            "labels": labels is not None}
    print(f"packed {n} x {width} bits: payload {payload} bytes, file {len(blob)} bytes")
    return [path, _write_json(out / "pack.json", info)]


def cmd_sizes(cfg, out: Path):
    from ._rng import child_rng

    if cfg["codec"] not in tinydata.CODECS:
        raise UsageError(f"key 'codec' must be one of {sorted(tinydata.CODECS)}")
    if cfg["model"]:
        model = _load_video_model(cfg["model"])
        feats = model.extract(_load_data(cfg["data"]).train.frames).reshape(-1)
        items, dims = len(feats) // 2048, 2048
    else:
        items, dims = cfg["items"], cfg["dims"]
        feats = tinydata.random_floats(items * dims, child_rng(cfg["seed"], "data", 9))
    rep = tinydata.size_report(items, dims, cfg["n_bits"], feats, cfg["codec"])
    doc = rep.to_dict()
    table = Report(tuple(doc), [doc])
    print(f"packed {rep.packed_bytes} B | raw floats {rep.raw_float_bytes} B | "
          f"{rep.codec} floats {rep.coded_float_bytes} B ({rep.coded_over_raw:.3g} of raw)")
    return [export_report(table, out / "sizes.csv"), export_report(table, out / "sizes.json")]


def cmd_supsize(cfg, out: Path):
    from .tasks import qa_from_text

    qa_path = cfg["qa"] or (Path(cfg["data"]) / "train.qa.tsv" if cfg["data"] else None)
    if qa_path is None:
        raise UsageError("key 'qa' (or 'data') is required")
    text = _require_file(qa_path).read_bytes()
    n = cfg["num_videos"]
    if n is None:
        n = len(set(qa_from_text(text.decode("utf-8")).video_ids.tolist()))
    if cfg["codec"] not in tinydata.CODECS:
        raise UsageError(f"key 'codec' must be one of {sorted(tinydata.CODECS)}")
    try:
        res = tinydata.supervision_size(text, n, cfg["codec"])
    except ValueError as exc:
        raise RuntimeFailure(str(exc)) from None
    print(f"supervision size: {res.bits_per_video:.4f} bits/video ({res.codec}, {res.coded_bytes} B)")
    return [_write_json(out / "supsize.json", res.__dict__)]


def cmd_invert(cfg, out: Path):
    from .estimators import FaceNetClassifier
    from .privacy import GateError, InversionConfig, attack_identities, check_gate
    from .tasks import gen_faces

    faces = gen_faces(seed=cfg["seed"])
    model = FaceNetClassifier(n_bits=cfg["n_bits"], random_state=cfg["seed"]).fit(faces.images, faces.labels)
    try:
        check_gate(model, cfg["gate"])
    except GateError as exc:
        raise RuntimeFailure(f"refusing to attack: {exc}") from None
    layer = cfg["target_layer"] or "pre_final_linear"
    try:
        icfg = InversionConfig(target_layer=layer, steps=cfg["steps"], step_size=cfg["step_size"],
                               init=cfg["init"], tv_weight=cfg["tv_weight"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if layer == "post_binarizer" and cfg["n_bits"] is None:
        raise UsageError("target_layer post_binarizer needs a bottleneck (n_bits)")
    results = attack_identities(model, faces, icfg, cfg["identities"], cfg["quantize"])
    paths, rows = [], []
    for ident, res in enumerate(results):
        stem = out / f"inversion_id{ident}"
        res.save(stem)
        paths += [Path(f"{stem}.json"), Path(f"{stem}.pgm")]
        rows.append({"identity": ident, "mse": res.mse, "psnr": res.psnr, "feature_mse": res.feature_mse})
    rep = Report(("identity", "mse", "psnr", "feature_mse"), rows,
                 {"n_bits": cfg["n_bits"], "target_layer": layer, "train_accuracy": model.train_accuracy_})
    mean = float(np.mean([r["mse"] for r in rows]))
    print(f"mean reconstruction MSE over {len(rows)} identities: {mean:.6f}")
    return paths + [export_report(rep, out / "inversion.csv")]


def cmd_kanon(cfg, out: Path):
    from .privacy import kanon_empirical, kanon_expected, kanon_truncate

    doc = {}
    if cfg["n_users"] is not None or cfg["bits"] is not None:
        if cfg["n_users"] is None or cfg["bits"] is None:
            raise UsageError("keys 'n_users' and 'bits' must be given together")
        if cfg["bits"] < 0:
            raise UsageError("key 'bits' must be >= 0")
        k = kanon_expected(cfg["n_users"], cfg["bits"])
        doc["expected"] = {"n_users": cfg["n_users"], "bits": cfg["bits"], "k": k}
        print(f"expected k = {k!r}")
    if cfg["codes"]:
        codes, _ = tinydata.load(_require_file(cfg["codes"]))
        doc["empirical"] = kanon_empirical(codes, cfg["truncate"]).to_dict()
        if cfg["truncate"] is not None:
            try:
                length, truncated = kanon_truncate(codes, cfg["truncate"])
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            doc["truncated"] = kanon_empirical(truncated, cfg["truncate"]).to_dict()
            print(f"prefix length L = {length}, min bucket {doc['truncated']['min_bucket']}")
        print(f"min bucket at full length: {doc['empirical']['min_bucket']}")
    elif cfg["truncate"] is not None:
        raise UsageError("key 'truncate' needs 'codes'")
    if not doc:
        raise UsageError("give n_users+bits and/or codes")
    return [_write_json(out / "kanon.json", doc)]


def cmd_bam(cfg, out: Path):
    from .analysis import bam, bam_frame_scores

    model = _load_video_model(cfg["model"])
    if model.featcomp_ is None:
        raise UsageError("BAM needs a bottleneck model")
    if not cfg["data"]:
        raise UsageError("key 'data' is required")
    data = _load_data(cfg["data"])
    videos = data.train if cfg["split"] == "train" else data.eval
    paths = []
    for i in cfg["videos"]:
        if not 0 <= i < len(videos):
            raise UsageError(f"video index {i} out of range [0, {len(videos)})")
        code = model.transform(videos.frames[i:i + 1])
        b = bam(model, videos.frames[i], code)
        paths += b.export(out, stem=f"bam_video{int(videos.ids[i])}")
        print(f"video {int(videos.ids[i])}: frame scores " + " ".join(f"{s:+.5f}" for s in bam_frame_scores(b)))
    return paths


def cmd_words(cfg, out: Path):
    from .analysis import format_neighbors, word_similarity
    from .tasks import gen_qa

    _check_task(cfg["task"])
    model = _load_video_model(cfg["model"])
    if not cfg["data"]:
        raise UsageError("key 'data' is required")
    data = _load_data(cfg["data"])
    codes = dict(zip(data.train.ids.tolist(), model.transform(data.train.frames)))
    rep = word_similarity(gen_qa(data.train, cfg["task"]).records(), codes, cfg["top_k"])
    text = format_neighbors(rep)
    sys.stdout.write(text)
    listing = out / "words.txt"
    with open(listing, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return [export_report(rep, out / "words.csv"), listing]


def cmd_gradcheck(cfg, out: Path):
    from .gradchecks import run_all

    reports = run_all(cfg["seed"], cfg["tolerance"], cfg["pipeline_tolerance"])
    rows = []
    for name, rep in reports.items():
        rows.append({"check": name, "worst_rel_error": rep.worst, "tolerance": rep.tolerance, "passed": rep.passed})
        print(f"{'ok  ' if rep.passed else 'FAIL'} {name:<24} worst {rep.worst:.3e} (tol {rep.tolerance:g})")
    table = Report(("check", "worst_rel_error", "tolerance", "passed"), rows)
    paths = [export_report(table, out / "gradcheck.csv")]
    if not all(r["passed"] for r in rows):
        write_manifest(out, "gradcheck", cfg, paths)
        raise RuntimeFailure("gradient check failed: " + ", ".join(r["check"] for r in rows if not r["passed"]))
    return paths


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "sweep": cmd_sweep, "transfer": cmd_transfer,
    "pack": cmd_pack, "sizes": cmd_sizes, "supsize": cmd_supsize, "invert": cmd_invert,
    "kanon": cmd_kanon, "bam": cmd_bam, "words": cmd_words, "gradcheck": cmd_gradcheck,
}


def main(argv=None, env=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args.command, args, env)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        from .diffcore import precision

        with precision(cfg["precision"]):
            outputs = COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, outputs)
        return EXIT_OK
    except UsageError as exc:
        print(f"fewbit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeFailure as exc:
        print(f"fewbit: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"fewbit: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
