"""``occdistill <command> <config.json>``: one pipeline step per invocation.

Every output file name is ``<command>-<hash>.<ext>`` where ``hash`` is the
first 12 hex digits of the SHA-256 of the canonical config JSON, so reruns of
the same config overwrite the same files with identical bytes. Wall-clock
timestamps go to ``<command>-<hash>.log`` only.

Exit codes: 0 success, 1 invalid config, 2 runtime failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from ._accel import set_threads
from .data import OcclusionMode, apply_occlusion, load_idx_dataset, split
from .distill import KDConfig, MetricsLog, TrainConfig, TripletConfig
from .distill import train_student_baseline, train_student_kd, train_student_triplet, train_teacher
from .errors import OccDistillError
from .evaluation import mcnemar_test, predict, report_from_predictions
from .experiment import derive_seed
from .explain import grad_cam, saliency_mass_split, write_pgm
from .fusion import concat_embeddings, extract_embeddings, save_embeddings_csv, save_svm, svm_predict, train_linear_svm
from .model import desk_spec, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger("occdistill.cli")

COMMANDS = ("train-teacher", "train-student", "distill-kd", "distill-triplet", "fuse", "evaluate", "compare", "explain")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2, 64

_PHASE = {
    "type": "object",
    "properties": {
        "epochs": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "patience": {"type": "integer", "minimum": 1},
        "decay_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    },
    "additionalProperties": False,
}
_PATH = {"type": "string", "minLength": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["seed", "output_dir"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": _PATH,
        "data": {
            "type": "object",
            "properties": {
                "train_images": _PATH,
                "train_labels": _PATH,
                "test_images": _PATH,
                "test_labels": _PATH,
                "per_class_cap": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "occlusion": {"enum": [m.value for m in OcclusionMode]},
        "validation_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "network": {
            "type": "object",
            "properties": {"embedding_dim": {"type": "integer", "minimum": 1}},
            "additionalProperties": False,
        },
        "batch_size": {"type": "integer", "minimum": 1},
        "phases": {
            "type": "object",
            "properties": {k: _PHASE for k in ("teacher", "student", "kd", "triplet")},
            "additionalProperties": False,
        },
        "kd": {
            "type": "object",
            "properties": {
                "lambda_kd": {"type": "number", "minimum": 0, "maximum": 1},
                "tau": {"type": "number", "exclusiveMinimum": 1},
            },
            "additionalProperties": False,
        },
        "triplet": {
            "type": "object",
            "properties": {
                "alpha": {"type": "number", "minimum": 0},
                "lambda_triplet": {"type": "number", "minimum": 0},
                "subset_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
            "additionalProperties": False,
        },
        "svm": {
            "type": "object",
            "properties": {
                "C": {"type": "number", "exclusiveMinimum": 0},
                "iterations": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "explain": {
            "type": "object",
            "properties": {
                "num_images": {"type": "integer", "minimum": 1},
                "conv_layer": {"type": ["integer", "null"]},
                "target": {"enum": ["label", "predicted"]},
            },
            "additionalProperties": False,
        },
        "evaluate_on": {"enum": ["occluded", "visible"]},
        "inputs": {
            "type": "object",
            "properties": {
                k: _PATH
                for k in ("teacher", "student", "model", "kd_student", "triplet_student", "predictions_a", "predictions_b")
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

# inputs each command needs beyond the config itself
_REQUIRED = {
    "train-teacher": ("data.train_images", "data.train_labels"),
    "train-student": ("data.train_images", "data.train_labels"),
    "distill-kd": ("data.train_images", "data.train_labels", "inputs.teacher"),
    "distill-triplet": ("data.train_images", "data.train_labels", "inputs.teacher", "inputs.student"),
    "fuse": (
        "data.train_images", "data.train_labels", "data.test_images", "data.test_labels",
        "inputs.kd_student", "inputs.triplet_student",
    ),
    "evaluate": ("data.test_images", "data.test_labels", "inputs.model"),
    "compare": ("inputs.predictions_a", "inputs.predictions_b"),
    "explain": ("data.test_images", "data.test_labels", "inputs.model"),
}

_DEFAULT_PHASES = {
    "teacher": {"epochs": 6, "lr": 0.01},
    "student": {"epochs": 6, "lr": 0.01},
    "kd": {"epochs": 3, "lr": 0.001},
    "triplet": {"epochs": 2, "lr": 1e-7},
}


class ConfigError(Exception):
    def __init__(self, field: str, message: str):
        super().__init__(f"config error at '{field}': {message}")
        self.field = field


@dataclass
class RunConfig:
    raw: dict
    base: Path  # directory the config file lives in; relative paths resolve against it

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def digest(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.raw["output_dir"])

    @property
    def occlusion(self) -> OcclusionMode:
        return OcclusionMode(self.raw.get("occlusion", OcclusionMode.UPPER_HALF_OCCLUDED.value))

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def lookup(self, dotted: str):
        node = self.raw
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return None
            node = node[part]
        return node

    def path(self, dotted: str) -> Path:
        return self.resolve(self.lookup(dotted))

    def phase(self, name: str) -> TrainConfig:
        p = dict(_DEFAULT_PHASES[name], **self.raw.get("phases", {}).get(name, {}))
        return TrainConfig(batch_size=self.raw.get("batch_size", 64), **p)

    def kd(self) -> KDConfig:
        return KDConfig(**self.raw.get("kd", {}))

    def triplet(self) -> TripletConfig:
        return TripletConfig(**self.raw.get("triplet", {}))

    def out(self, command: str, suffix: str) -> Path:
        return self.output_dir / f"{command}-{self.digest}{suffix}"


def _schema_field(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = [r for r in err.validator_value if r not in (err.instance or {})]
        parts += missing[:1]
    return ".".join(parts) or "<root>"


def load_config(path, command: str) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("<file>", f"{path} does not exist")
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError("<file>", f"{path} is not UTF-8 JSON ({e})")
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigError(_schema_field(errors[0]), errors[0].message)
    cfg = RunConfig(raw, path.resolve().parent)
    for dotted in _REQUIRED[command]:
        if cfg.lookup(dotted) is None:
            raise ConfigError(dotted, f"required by '{command}'")
    for section in ("data", "inputs"):
        for key, value in raw.get(section, {}).items():
            if key == "per_class_cap":
                continue
            if not cfg.resolve(value).exists():
                raise ConfigError(f"{section}.{key}", f"{value} does not exist")
    return cfg


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _train_data(cfg: RunConfig):
    full = load_idx_dataset(cfg.path("data.train_images"), cfg.path("data.train_labels"), cfg.lookup("data.per_class_cap"))
    vis_tr, vis_va = split(full, cfg.raw.get("validation_fraction", 0.1), cfg.seed)
    return vis_tr, vis_va, apply_occlusion(vis_tr, cfg.occlusion), apply_occlusion(vis_va, cfg.occlusion)


def _test_data(cfg: RunConfig):
    return load_idx_dataset(cfg.path("data.test_images"), cfg.path("data.test_labels"))


def _spec_for(cfg: RunConfig, dataset):
    emb = cfg.lookup("network.embedding_dim") or 128
    return desk_spec(dataset.image_shape, dataset.num_classes, emb)


def _fresh_metrics(cfg: RunConfig, command: str) -> MetricsLog:
    path = cfg.out(command, ".metrics.jsonl")
    path.unlink(missing_ok=True)
    return MetricsLog(path)


def _load_model(cfg: RunConfig, key: str, spec=None):
    ck = load_checkpoint(cfg.path(key), spec.fingerprint if spec is not None else None)
    return ck.params, ck.spec


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def _write_predictions(path: Path, preds, labels) -> Path:
    return _write_json(path, {"predictions": [int(v) for v in preds], "labels": [int(v) for v in labels]})


def _finish_training(cfg: RunConfig, command: str, result, spec) -> list:
    ck = save_checkpoint(cfg.out(command, ".ckpt"), result.params, spec, result.state)
    return [ck, cfg.out(command, ".metrics.jsonl")]


def cmd_train_teacher(cfg: RunConfig, command: str) -> list:
    vis_tr, vis_va, _, _ = _train_data(cfg)
    spec = _spec_for(cfg, vis_tr)
    res = train_teacher(spec, vis_tr, vis_va, cfg.phase("teacher"), derive_seed(cfg.seed, "teacher"),
                        _fresh_metrics(cfg, command))
    return _finish_training(cfg, command, res, spec)


def cmd_train_student(cfg: RunConfig, command: str) -> list:
    _, _, occ_tr, occ_va = _train_data(cfg)
    spec = _spec_for(cfg, occ_tr)
    res = train_student_baseline(spec, occ_tr, occ_va, cfg.phase("student"), derive_seed(cfg.seed, "student"),
                                 _fresh_metrics(cfg, command))
    return _finish_training(cfg, command, res, spec)


def cmd_distill_kd(cfg: RunConfig, command: str) -> list:
    vis_tr, _, occ_tr, occ_va = _train_data(cfg)
    spec = _spec_for(cfg, occ_tr)
    teacher, _ = _load_model(cfg, "inputs.teacher", spec)
    if cfg.lookup("inputs.student") is not None:
        init, _ = _load_model(cfg, "inputs.student", spec)
    else:
        init = init_params(spec, derive_seed(cfg.seed, "student"))
    res = train_student_kd(init, teacher, spec, occ_tr, vis_tr, occ_va, cfg.kd(), cfg.phase("kd"),
                           derive_seed(cfg.seed, "kd"), _fresh_metrics(cfg, command))
    return _finish_training(cfg, command, res, spec)


def cmd_distill_triplet(cfg: RunConfig, command: str) -> list:
    vis_tr, _, occ_tr, occ_va = _train_data(cfg)
    spec = _spec_for(cfg, occ_tr)
    teacher, _ = _load_model(cfg, "inputs.teacher", spec)
    init, _ = _load_model(cfg, "inputs.student", spec)
    res = train_student_triplet(init, teacher, spec, occ_tr, vis_tr, occ_va, cfg.triplet(), cfg.phase("triplet"),
                                derive_seed(cfg.seed, "triplet"), _fresh_metrics(cfg, command))
    return _finish_training(cfg, command, res, spec)


def cmd_fuse(cfg: RunConfig, command: str) -> list:
    _, _, occ_tr, _ = _train_data(cfg)
    test_occ = apply_occlusion(_test_data(cfg), cfg.occlusion)
    kd, spec = _load_model(cfg, "inputs.kd_student")
    trip, _ = _load_model(cfg, "inputs.triplet_student", spec)
    emb_tr = concat_embeddings(extract_embeddings(kd, spec, occ_tr, "kd"), extract_embeddings(trip, spec, occ_tr, "triplet"))
    emb_te = concat_embeddings(
        extract_embeddings(kd, spec, test_occ, "kd"), extract_embeddings(trip, spec, test_occ, "triplet")
    )
    svm_cfg = cfg.raw.get("svm", {})
    svm = train_linear_svm(emb_tr, svm_cfg.get("C", 1.0), svm_cfg.get("iterations", 1000), cfg.seed)
    preds = svm_predict(svm, emb_te)
    report = report_from_predictions(preds, emb_te.labels, spec.num_classes)
    return [
        save_embeddings_csv(cfg.out(command, ".train-embeddings.csv"), emb_tr),
        save_embeddings_csv(cfg.out(command, ".test-embeddings.csv"), emb_te),
        save_svm(cfg.out(command, ".svm.json"), svm),
        _write_predictions(cfg.out(command, ".predictions.json"), preds, emb_te.labels),
        _write_json(cfg.out(command, ".report.json"), report.to_dict()),
    ]


def cmd_evaluate(cfg: RunConfig, command: str) -> list:
    test = _test_data(cfg)
    if cfg.raw.get("evaluate_on", "occluded") == "occluded":
        test = apply_occlusion(test, cfg.occlusion)
    params, spec = _load_model(cfg, "inputs.model")
    preds = predict(params, spec, test)
    report = report_from_predictions(preds, test.labels, spec.num_classes)
    return [
        _write_json(cfg.out(command, ".report.json"), report.to_dict()),
        _write_predictions(cfg.out(command, ".predictions.json"), preds, test.labels),
    ]


def _read_predictions(path: Path):
    d = json.loads(path.read_text(encoding="utf-8"))
    return np.asarray(d["predictions"], dtype=np.int64), np.asarray(d["labels"], dtype=np.int64)


def cmd_compare(cfg: RunConfig, command: str) -> list:
    pa, la = _read_predictions(cfg.path("inputs.predictions_a"))
    pb, lb = _read_predictions(cfg.path("inputs.predictions_b"))
    if not np.array_equal(la, lb):
        raise OccDistillError("prediction files disagree on labels")
    res = mcnemar_test(pa, pb, la)
    return [_write_json(cfg.out(command, ".mcnemar.json"), res.to_dict())]


def cmd_explain(cfg: RunConfig, command: str) -> list:
    test = apply_occlusion(_test_data(cfg), cfg.occlusion)
    params, spec = _load_model(cfg, "inputs.model")
    opts = cfg.raw.get("explain", {})
    n = min(opts.get("num_images", 8), len(test))
    rows, written = [], []
    for i in range(n):
        target = int(test.labels[i]) if opts.get("target", "label") == "label" else None
        sal = grad_cam(params, spec, test.images[i], target, opts.get("conv_layer"))
        split_ = saliency_mass_split(sal)
        p = write_pgm(cfg.out(command, f".{i:04d}.pgm"), sal.map)
        written.append(p)
        rows.append({"index": i, "file": p.name, "target_class": sal.target_class, "upper_mass": split_.upper,
                     "lower_mass": split_.lower, "reason": split_.reason})
    lower = [r["lower_mass"] for r in rows]
    summary = {"layer_index": sal.layer_index, "maps": rows, "mean_lower_mass": float(np.mean(lower))}
    written.append(_write_json(cfg.out(command, ".saliency.json"), summary))
    return written


HANDLERS = {
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "distill-kd": cmd_distill_kd,
    "distill-triplet": cmd_distill_triplet,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "explain": cmd_explain,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _sidecar(cfg: RunConfig, command: str) -> logging.Handler:
    h = logging.FileHandler(cfg.out(command, ".log"), encoding="utf-8")
    h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    return h


def run(command: str, config_path, threads: Optional[int] = None) -> int:
    if command not in HANDLERS:
        print(f"unknown command '{command}'; expected one of {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(config_path, command)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    env_threads = os.environ.get("OD_THREADS")
    if threads is None and env_threads:
        try:
            threads = int(env_threads)
        except ValueError:
            print(f"OD_THREADS must be an integer, got '{env_threads}'", file=sys.stderr)
            return EXIT_CONFIG
    if threads:
        set_threads(threads)

    root = logging.getLogger("occdistill")
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        handler = _sidecar(cfg, command)
    except OSError as e:
        print(f"cannot create output directory: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    root.addHandler(handler)
    level = root.level
    root.setLevel(logging.INFO)
    try:
        log.info("%s with config %s (hash %s)", command, config_path, cfg.digest)
        written = HANDLERS[command](cfg, command)
        for p in written:
            print(p)
        log.info("done: %s", ", ".join(Path(p).name for p in written))
        return EXIT_OK
    except (OccDistillError, OSError, ValueError, KeyError) as e:
        log.exception("%s failed", command)
        print(f"{command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        root.removeHandler(handler)
        root.setLevel(level)
        handler.close()


def main(argv=None) -> int:
    parser = _Parser(prog="occdistill", description="Occlusion-robust teacher-student distillation pipeline.")
    parser.add_argument("command", help=", ".join(COMMANDS))
    parser.add_argument("config", help="path to a UTF-8 JSON run config")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default: OD_THREADS or all cores)")
    args = parser.parse_args(argv)
    return run(args.command, args.config, args.threads)


if __name__ == "__main__":
    sys.exit(main())
