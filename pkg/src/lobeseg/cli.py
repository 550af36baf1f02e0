"""Command-line entry point: ``lobeseg <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck as gc
from .ablation import lobe_scores
from .config import config_schema, load_run_config
from .io_formats import load_checkpoint, read_any_volume, read_volume, write_volume
from .losses import build_dice_report, emphysema_csv, regional_emphysema
from .phantom import DISEASES, Jitter, PhantomSpec, make_case, manifest
from .preprocess import (
    AUX_MAPPING,
    VOCABULARY,
    LabelMap,
    PreparedCase,
    PreprocessConfig,
    Volume,
    clip_hu,
    prepared_from_cube,
    resample,
    zscore,
)
from .tensor import Tensor, no_grad
from .trainer import history_csv, restore, train
from .vnet import ConfigError, ModelConfig, VNet

logger = logging.getLogger("lobeseg")


class UsageError(Exception):
    """Bad arguments that argparse cannot detect on its own."""


# -- case directories -------------------------------------------------------------------


def _case_ids(directory: Path) -> list[str]:
    mf = directory / "manifest.json"
    if mf.exists():
        return [c["case_id"] for c in json.loads(mf.read_text())["cases"]]
    ids = sorted(p.name[: -len("_image.vol")] for p in directory.glob("*_image.vol"))
    if not ids:
        raise FileNotFoundError(f"no cases found in {directory}")
    return ids


def load_prepared_dir(directory) -> list[PreparedCase]:
    """Read a preprocessed case directory into model-ready tensors."""
    directory = Path(directory)
    cases = []
    for cid in _case_ids(directory):
        image = read_volume(directory / f"{cid}_image.vol")
        lab_path = directory / f"{cid}_labels.vol"
        labels = read_volume(lab_path).voxels if lab_path.exists() else None
        cases.append(prepared_from_cube(image.voxels, labels, cid))
    return cases


def _preprocess_volume(vol: Volume, cfg: PreprocessConfig) -> Volume:
    s = cfg.target_size
    return resample(zscore(clip_hu(vol, cfg), cfg.eps), (s, s, s), "trilinear")


# -- subcommands ----------------------------------------------------------------------


def cmd_gen_phantoms(args) -> int:
    template = PhantomSpec()
    if args.config:
        template = load_run_config(args.config, args.set).phantom
    template = dataclasses.replace(template, size=args.size if args.size else template.size)
    diseases = args.disease.split(",") if args.disease else [template.disease]
    for d in diseases:
        if d not in DISEASES:
            raise UsageError(f"unknown disease {d!r}; choose from {', '.join(DISEASES)}")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    severity = args.severity
    if severity is None:
        severity = template.severity or 0.5
    jitter = Jitter(0, 0, 0, 0, 0) if args.no_jitter else Jitter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(args.n):
        t = dataclasses.replace(template, disease=diseases[i % len(diseases)],
                                severity=severity if diseases[i % len(diseases)] != "none" else 0.0)
        case = make_case(t, i, args.seed, jitter, args.prefix)
        write_volume(out / f"{case.case_id}_image.vol", case.volume)
        write_volume(out / f"{case.case_id}_labels.vol", case.labels)
        cases.append(case)
    (out / "manifest.json").write_text(manifest(cases) + "\n")
    print(f"wrote {len(cases)} cases to {out}")
    return 0


def cmd_preprocess(args) -> int:
    src, out = Path(args.inp), Path(args.out)
    cfg = PreprocessConfig()
    if args.config:
        cfg = load_run_config(args.config, args.set).preprocess
    if args.size:
        cfg = dataclasses.replace(cfg, target_size=args.size)
    ids = _case_ids(src)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for cid in ids:
        vol = read_any_volume(src / f"{cid}_image.vol")
        v = _preprocess_volume(vol, cfg)
        write_volume(out / f"{cid}_image.vol", v)
        lab_path = src / f"{cid}_labels.vol"
        if lab_path.exists():
            s = cfg.target_size
            write_volume(out / f"{cid}_labels.vol", resample(read_volume(lab_path), (s, s, s), "nearest"))
        entries.append({"case_id": cid})
    doc = {"cases": entries, "preprocess": dataclasses.asdict(cfg)}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"preprocessed {len(ids)} cases into {out}")
    return 0


def cmd_train(args) -> int:
    if args.schema:
        print(json.dumps(config_schema(), indent=2, sort_keys=True))
        return 0
    overrides = list(args.set or [])
    if args.data:
        overrides.append(f"paths.train_data={json.dumps(str(Path(args.data).resolve()))}")
    if args.out:
        overrides.append(f"paths.out_dir={json.dumps(str(Path(args.out).resolve()))}")
    cfg = load_run_config(args.config, overrides)
    if args.single_task:
        cfg.model.aux_head = False
        cfg.train.lambda_aux = 0.0
    if cfg.paths.train_data is None:
        raise UsageError("no training data: set paths.train_data in the config or pass --data")
    for key in ("train_data", "val_data"):
        p = getattr(cfg.paths, key)
        if p is not None and not Path(p).is_dir():
            raise UsageError(f"paths.{key} does not exist: {p}")
    data = load_prepared_dir(cfg.paths.train_data)
    val = load_prepared_dir(cfg.paths.val_data) if cfg.paths.val_data else None
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.train.checkpoint_dir = str(out / "checkpoints")
    (out / "config.json").write_text(cfg.to_json() + "\n")
    model = VNet(cfg.model)
    resume = load_checkpoint(args.resume) if args.resume else None
    model, history = train(model, data, val, cfg.train, resume=resume)
    (out / "history.csv").write_text(history_csv(history))
    last = history[-1] if history else None
    if last:
        print(f"epoch {last['epoch']}: loss {last['loss_total']:.4f}, val dice {last['val_dice_mean']:.4f}")
    return 0


def _load_model(path) -> VNet:
    ckpt = load_checkpoint(path)
    model = VNet(ModelConfig.from_dict(ckpt.model_config))
    restore(model, ckpt)
    return model


def cmd_eval(args) -> int:
    cases = load_prepared_dir(args.data)
    ids = [c.case_id for c in cases]
    scores = lobe_scores(_load_model(args.model), cases)
    compare = lobe_scores(_load_model(args.compare), cases) if args.compare else None
    report = build_dice_report(scores, ids, compare, paired=not args.welch)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    if args.per_case:
        Path(args.per_case).write_text(report.per_case_csv())
    sys.stdout.write(text)
    return 0


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    vol = read_any_volume(args.inp)
    cfg = PreprocessConfig(target_size=model.config.input_size)
    v = _preprocess_volume(vol, cfg)
    with no_grad():
        main, aux = model.forward(Tensor(v.voxels[None, None]), "eval")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    main_lab = main.data[0].argmax(axis=0).astype(np.uint8)
    write_volume(out / "main_labels.vol", LabelMap(main_lab, VOCABULARY, v.spacing))
    if aux is not None:
        to_vocab = np.zeros(max(AUX_MAPPING.values()) + 1, dtype=np.uint8)
        for src, dst in AUX_MAPPING.items():
            if dst:
                to_vocab[dst] = src
        aux_lab = to_vocab[aux.data[0].argmax(axis=0)]
        write_volume(out / "aux_labels.vol", LabelMap(aux_lab, VOCABULARY, v.spacing))
    print(f"wrote label maps to {out}")
    return 0


def cmd_stats(args) -> int:
    vol = read_any_volume(args.inp)
    labels = read_volume(args.mask)
    if not isinstance(labels, LabelMap):
        raise UsageError(f"{args.mask} is not a label map")
    if labels.dims != vol.dims:
        raise UsageError(f"mask dims {labels.dims} differ from volume dims {vol.dims}")
    rows = regional_emphysema(vol, labels, args.threshold, args.percentile)
    if not rows:
        raise ValueError("label map contains no lung voxels")
    text = emphysema_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    ops = args.ops.split(",") if args.ops else None
    if ops:
        unknown = [o for o in ops if o not in gc.OPS]
        if unknown:
            raise UsageError(f"unknown ops {unknown}; available: {', '.join(gc.OPS)}")
    results = gc.run_suite(ops, args.seeds)
    print(gc.format_results(results))
    return 0 if all(r.passed for r in results) else 1


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP worker threads (1 gives bitwise-repeatable runs)")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity on standard error")

    conf = argparse.ArgumentParser(add_help=False)
    conf.add_argument("--config", help="JSON run configuration file")
    conf.add_argument("--set", action="append", metavar="KEY=VALUE",
                      help="override a config entry, e.g. train.epochs=5 (repeatable)")

    p = argparse.ArgumentParser(prog="lobeseg", description="Lung lobe segmentation with an auxiliary airway task.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen-phantoms", parents=[common, conf], help="generate synthetic CT phantoms")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, default=4, help="number of cases")
    g.add_argument("--seed", type=int, default=0, help="dataset seed")
    g.add_argument("--size", type=int, default=None, help="grid size (default from template, 64)")
    g.add_argument("--disease", default=None,
                   help=f"disease mode or comma list cycled over cases ({', '.join(DISEASES)})")
    g.add_argument("--severity", type=float, default=None, help="disease severity in [0, 1] (default 0.5 for diseased cases)")
    g.add_argument("--prefix", default="case", help="case id prefix")
    g.add_argument("--no-jitter", action="store_true", help="disable anatomical jitter")
    g.set_defaults(func=cmd_gen_phantoms)

    pp = sub.add_parser("preprocess", parents=[common, conf], help="clip, normalize and resample cases")
    pp.add_argument("--in", dest="inp", required=True, help="case directory")
    pp.add_argument("--out", required=True, help="output directory")
    pp.add_argument("--size", type=int, default=None, help="cube edge length (default 32)")
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", parents=[common, conf], help="train a model")
    t.add_argument("--data", help="preprocessed training directory (overrides paths.train_data)")
    t.add_argument("--out", help="run output directory (overrides paths.out_dir)")
    t.add_argument("--single-task", action="store_true", help="drop the auxiliary head (lambda_aux = 0)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--schema", action="store_true", help="print the config schema and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="per-lobe Dice report")
    e.add_argument("--model", required=True, help="checkpoint")
    e.add_argument("--data", required=True, help="preprocessed directory with labels")
    e.add_argument("--compare", help="second checkpoint; adds a t-test p-value column")
    e.add_argument("--welch", action="store_true", help="unpaired Welch test instead of paired")
    e.add_argument("--out", help="write the report CSV here as well as to stdout")
    e.add_argument("--per-case", help="write per-case Dice CSV here")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", parents=[common], help="segment one volume")
    pr.add_argument("--model", required=True, help="checkpoint")
    pr.add_argument("--in", dest="inp", required=True, help="native or NIfTI-1 volume")
    pr.add_argument("--out", required=True, help="output directory")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("stats", parents=[common], help="emphysema statistics per region")
    s.add_argument("--in", dest="inp", required=True, help="HU volume")
    s.add_argument("--mask", required=True, help="label map")
    s.add_argument("--threshold", type=float, default=-950.0, help="low-attenuation threshold in HU")
    s.add_argument("--percentile", type=float, default=15.0, help="percentile for the density column")
    s.add_argument("--out", help="write CSV here as well as to stdout")
    s.set_defaults(func=cmd_stats)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--seeds", type=int, default=gc.N_SEEDS, help="seeds per op")
    c.add_argument("--ops", help="comma list of ops (default: all)")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    limits = threadpool_limits(args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except (UsageError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - report any runtime failure as exit 1
        logger.debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
