"""Command line entry point: ``semiseg <subcommand> --config FILE --seed N --out DIR``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 ablation matrix finished with some failed cells.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, Optional

import numpy as np

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .. import losses
from .. import pipeline as pl
from ..dataset import build_dataset
from ..models import load_checkpoint, save_checkpoint
from ..phantom import PhantomConfig
from .experiment import ExperimentSpec, RunSettings, load_cell_data
from .matrix import MatrixConfig, _pin_threads, load_bundle, run_ablation_matrix
from .report import emit_report

log = logging.getLogger("semiseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3

SPEC_KEYS = ("dataset", "arch", "method", "degrade_mode", "sup_loss", "labeled_subjects_used", "view_filter")
SETTING_KEYS = tuple(f.name for f in fields(RunSettings))
GEN_KEYS = ("volume_side", "noise_sigma", "bias_strength", "slices_per_view", "distractors",
            "n_labeled", "n_unlabeled", "split_spec")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(path: Optional[str]) -> Dict:
    """A JSON object, or TOML-style ``key = value`` lines."""
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError:
        try:
            cfg = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"config {path} is neither JSON nor TOML: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a mapping")
    return cfg


def _settings(cfg: Dict) -> RunSettings:
    raw = dict(cfg.get("settings", {}))
    raw.update({k: cfg[k] for k in SETTING_KEYS if k in cfg})
    try:
        return RunSettings(**raw)
    except TypeError as exc:
        raise UsageError(f"bad settings: {exc}") from None


def _spec(cfg: Dict, method: str, seed: int) -> ExperimentSpec:
    if "dataset" not in cfg:
        raise UsageError("config needs a 'dataset' entry")
    kw = {k: cfg[k] for k in SPEC_KEYS if k in cfg}
    kw["method"] = method
    try:
        return ExperimentSpec(seeds=(seed,), settings=_settings(cfg), **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _need(cfg: Dict, key: str) -> str:
    if key not in cfg:
        raise UsageError(f"config needs a {key!r} entry")
    return str(cfg[key])


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _save_stage(out: Path, name: str, ckpt, record: pl.StageRecord) -> str:
    digest = save_checkpoint(ckpt, out / f"{name}.sslc")
    record.checkpoint_path = f"{name}.sslc"
    record.write(out, name)
    print(f"{name}: {out / (name + '.sslc')} sha256={digest} best_val={record.best_val:.6f}")
    return digest


# -- subcommands ----------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    out = _out(args)
    unknown = set(cfg) - set(GEN_KEYS) - {"seed"}
    if unknown:
        raise UsageError(f"unknown gen-data key(s) {sorted(unknown)}")
    pkw = {k: cfg[k] for k in ("volume_side", "noise_sigma", "bias_strength", "slices_per_view", "distractors")
           if k in cfg}
    try:
        pc = PhantomConfig(seed=_seed(args, cfg), **pkw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    m = build_dataset(pc, int(cfg.get("n_labeled", 16)), int(cfg.get("n_unlabeled", 32)),
                      tuple(cfg.get("split_spec", (10, 2, 4))), out)
    print(f"dataset: {out} ({len(m.samples)} images, {len(m.labeled_subjects)} labeled subjects, "
          f"{len(m.unlabeled_subjects)} unlabeled)")


def cmd_pretrain(args, cfg):
    seed = _seed(args, cfg)
    spec = _spec(cfg, "self_sl", seed)
    out = _out(args)
    data = load_cell_data(spec)
    s = spec.settings
    ck, rec = pl.pretrain_restoration(data.pretrain_images, data.labeled_val.images, s.model_config(spec.arch),
                                      s.train_config(seed, spec.sup_loss, spec.degrade_mode, pretrain=True),
                                      train_subjects=data.pretrain_subjects)
    _save_stage(out, "cnn1", ck, rec)


def cmd_finetune(args, cfg):
    seed = _seed(args, cfg)
    spec = _spec(cfg, "self_sl", seed)
    out = _out(args)
    cnn1 = load_checkpoint(_need(cfg, "init"))
    data = load_cell_data(spec)
    s = spec.settings
    ck, rec = pl.finetune_segmentation(cnn1, data.labeled_train, data.labeled_val, s.model_config(spec.arch),
                                       s.train_config(seed, spec.sup_loss, spec.degrade_mode))
    _save_stage(out, "cnn2", ck, rec)


def save_pseudo(pseudo: pl.PseudoLabelSet, out: Path) -> None:
    keys = sorted(pseudo.masks)
    labels = np.stack([pseudo.masks[k].argmax(axis=0).astype(np.uint8) for k in keys]) if keys else np.zeros((0, 1, 1), np.uint8)
    np.savez_compressed(out / "pseudo.npz", keys=np.array(keys, dtype=str), labels=labels)
    (out / "pseudo.json").write_text(json.dumps(pseudo.provenance, sort_keys=True, indent=1) + "\n")


def load_pseudo(path) -> pl.PseudoLabelSet:
    p = Path(path)
    if p.is_dir():
        p = p / "pseudo.npz"
    with np.load(p) as z:
        keys, labels = [str(k) for k in z["keys"]], z["labels"]
    masks = {k: losses.one_hot(lab, 3).astype(np.uint8) for k, lab in zip(keys, labels)}
    prov = json.loads(p.with_suffix(".json").read_text())
    return pl.PseudoLabelSet(masks, prov)


def cmd_pseudo(args, cfg):
    seed = _seed(args, cfg)
    spec = _spec(cfg, "semi_sl", seed)
    out = _out(args)
    cnn2 = load_checkpoint(_need(cfg, "init"))
    pseudo = pl.predict_pseudo_labels(cnn2, load_cell_data(spec).unlabeled)
    save_pseudo(pseudo, out)
    print(f"pseudo labels: {len(pseudo)} images -> {out / 'pseudo.npz'}")


def cmd_semi(args, cfg):
    seed = _seed(args, cfg)
    spec = _spec(cfg, "semi_sl", seed)
    out = _out(args)
    cnn1 = load_checkpoint(_need(cfg, "init"))
    pseudo = load_pseudo(_need(cfg, "pseudo"))
    data = load_cell_data(spec)
    s = spec.settings
    ck, rec = pl.train_semi(cnn1, data.labeled_train, pseudo, data.unlabeled, data.labeled_val,
                            s.model_config(spec.arch), s.train_config(seed, spec.sup_loss, spec.degrade_mode))
    _save_stage(out, "cnn3", ck, rec)


def cmd_eval(args, cfg):
    spec = _spec(cfg, "semi_sl", _seed(args, cfg))
    out = _out(args)
    ck = load_checkpoint(_need(cfg, "checkpoint"))
    data = load_cell_data(spec)
    metrics = pl.evaluate(ck, data.test, data.manifest)
    (out / "metrics.json").write_text(json.dumps(metrics.to_json(), sort_keys=True, indent=1) + "\n")
    parts = ", ".join(f"{k} {v['mean']:.4f}({v['std']:.4f})" for k, v in metrics.summary.items())
    print(f"test DSC: {parts}; mean foreground {metrics.mean_foreground:.4f}")


def _report(bundle, out: Path) -> int:
    summary = emit_report(bundle, out / "report")
    done = sum(c.complete for c in bundle.cells)
    print(f"matrix: {done}/{len(bundle.cells)} cells complete; report in {out / 'report'}")
    delta = summary["semi_over_baseline"]["mean_delta"]
    if delta is not None:
        print(f"semi over baseline: mean {delta:+.4f} DSC")
    for f in bundle.failures:
        print(f"FAILED {f['cell_id']} seed {f['seed']}: {f['error']}", file=sys.stderr)
    return EXIT_PARTIAL if bundle.failures else EXIT_OK


def cmd_ablate(args, cfg):
    if args.seed is not None:
        cfg = dict(cfg, seeds=[args.seed])
    try:
        matrix = MatrixConfig.from_dict(cfg)
        matrix.cells()
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad matrix config: {exc}") from None
    out = _out(args)
    bundle = run_ablation_matrix(matrix, out, jobs=args.jobs)
    return _report(bundle, out)


def cmd_report(args, cfg):
    out = _out(args)
    return _report(load_bundle(out), out)


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "pseudo": cmd_pseudo,
            "semi": cmd_semi, "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report}

HELP = {
    "gen-data": "generate the phantom dataset (PGM slices + manifest)",
    "pretrain": "restoration pretraining (CNN 1)",
    "finetune": "fine-tune CNN 1 on labeled images (CNN 2); config key 'init' = cnn1 checkpoint",
    "pseudo": "predict pseudo labels for the unlabeled pool; 'init' = cnn2 checkpoint",
    "semi": "semi-supervised training (CNN 3); 'init' = cnn1 checkpoint, 'pseudo' = pseudo dir",
    "eval": "score a checkpoint on the test subjects; 'checkpoint' = path",
    "ablate": "run an ablation matrix and emit the report",
    "report": "re-emit the report of an existing ablation directory",
}


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="semiseg", description="Self- and semi-supervised segmentation on phantom data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name])
        sp.add_argument("--config", help="JSON or TOML key/value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes (ablate)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.jobs < 1:
        print("semiseg: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    _pin_threads()
    try:
        cfg = load_config(args.config)
        code = COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"semiseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported, mapped to the runtime exit code
        print(f"semiseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
