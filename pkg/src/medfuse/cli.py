"""``medfuse`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Failures also print one JSON object on stderr (``{"error": ..., "message": ...}``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

SEED_ENV = "MEDFUSE_SEED"
log = logging.getLogger("medfuse")


class UsageError(Exception):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class RuntimeFailure(Exception):
    pass


class _HelpFormatter(argparse.HelpFormatter):
    """Append every optional flag's default unless the help already states it."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default:" in text or action.required or not action.option_strings or action.default is argparse.SUPPRESS:
            return text
        if isinstance(action, (argparse._HelpAction, argparse._StoreTrueAction)):
            return text if isinstance(action, argparse._HelpAction) else f"{text} (default: off)"
        shown = "none" if action.default is None else "%(default)s"
        return f"{text} (default: {shown})"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -------------------------------------------------------------------

def _resolve_seed(flag: int | None, fallback: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer", key=SEED_ENV) from None
    return fallback


def _load_config(path: str | None):
    from medfuse import config as run_config

    cfg = run_config.load(path) if path else run_config.RunConfig()
    cfg.validate()
    return cfg


def _load_store(data_dir: Path, manifest: dict):
    from medfuse.text_embed import load_embedding_store

    name = manifest["files"].get("embeddings")
    return load_embedding_store(data_dir / name) if name else None


def _read_vocab(path: str) -> list[str]:
    items = [line.strip() for line in Path(path).read_text().splitlines()]
    items = [x for x in items if x and not x.startswith("#")]
    if len(set(items)) != len(items):
        raise UsageError(f"{path}: duplicate lab items in vocabulary")
    return items


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> str:
    from medfuse import config as run_config
    from medfuse.ehr_data import synth_generate, write_dataset

    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, 0)
    syn = synth_generate(cfg.data, seed)
    ds = syn.dataset
    provenance = {"seed": seed, "config": cfg.to_dict()["data"], "config_hash": cfg.hash()}
    extra = {
        "synth.json": (json.dumps(provenance, indent=2, sort_keys=True) + "\n").encode(),
        "run.ini": run_config.dumps(cfg).encode(),
    }
    write_dataset(ds, args.out, embeddings=syn.embeddings, extra_files=extra)
    n_valid = len(ds.split_indices("valid"))
    return (
        f"synth: {len(ds)} visits ({len(ds) - n_valid} train / {n_valid} valid), "
        f"{len(ds.vocabulary)} lab items, {ds.n_labels} labels, seed {seed} -> {args.out}"
    )


def _read_notes(path: str) -> dict[str, dict[str, str]]:
    from medfuse.ehr_data import filter_note_sections

    notes = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            visit_id, sections = str(rec["visit_id"]), rec["sections"]
        except (ValueError, KeyError, TypeError) as exc:
            raise RuntimeFailure(f"{path}:{line_no}: malformed note record ({exc})") from None
        notes[visit_id] = filter_note_sections(sections)
    return notes


def _read_labels(path: str):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or rows[0][:2] != ["PATIENT_ID", "VISIT_ID"]:
        raise RuntimeFailure(f"{path}: header must start with PATIENT_ID,VISIT_ID")
    header = rows[0]
    has_split = len(header) > 2 and header[2] == "SPLIT"
    names = header[3:] if has_split else header[2:]
    if not names:
        raise RuntimeFailure(f"{path}: no label columns")
    out = []
    for line_no, r in enumerate(rows[1:], start=2):
        cells = r[3:] if has_split else r[2:]
        if len(cells) != len(names) or any(c not in ("0", "1") for c in cells):
            raise RuntimeFailure(f"{path}:{line_no}: expected {len(names)} 0/1 label cells")
        out.append((r[0], r[1], r[2] if has_split else None, [c == "1" for c in cells]))
    return names, out


def cmd_prepare(args) -> str:
    from medfuse.ehr_data import (
        LABTEXT_SECTION,
        DataError,
        EHRDataset,
        fit_normalization_arrays,
        parse_lab_csv,
        render_abnormal_text,
        write_dataset,
    )
    from medfuse.text_embed import EmbeddingProvider, EmbeddingStore, http_transport, load_embedding_store

    vocab = _read_vocab(args.vocab)
    parsed = parse_lab_csv(Path(args.labs).read_bytes(), vocab)
    for err in parsed.errors[:20]:
        log.warning("%s:%d: %s", args.labs, err.line, err.reason)
    panels = {(pid, vid): panel for pid, vid, panel in parsed.panels}
    notes = _read_notes(args.notes)
    label_names, label_rows = _read_labels(args.labels)

    keep, skipped = [], 0
    for pid, vid, split, labels in label_rows:
        panel = panels.get((pid, vid))
        has_labs = panel is not None and panel.observed.any()
        if not has_labs and not notes.get(vid):
            skipped += 1
            continue
        keep.append((pid, vid, split, labels, panel))
    if not keep:
        raise RuntimeFailure("no labelled visit has lab values or note sections")

    n, D = len(keep), len(vocab)
    values, observed, abnormal = np.zeros((n, D)), np.zeros((n, D), bool), np.zeros((n, D), bool)
    for i, (_, _, _, _, panel) in enumerate(keep):
        if panel is not None:
            values[i], observed[i], abnormal[i] = panel.values, panel.observed, panel.abnormal

    # split by patient so no patient straddles train and valid
    seed = _resolve_seed(args.seed, 0)
    patients = sorted({k[0] for k in keep})
    rng = np.random.default_rng([seed, 4])
    valid_patients = set(np.asarray(patients, dtype=object)[rng.random(len(patients)) < args.valid_fraction])
    split = [s if s is not None else ("valid" if pid in valid_patients else "train") for pid, _, s, _, _ in keep]

    units = {item: parsed.units.get(item, "") for item in vocab}
    ds = EHRDataset(
        vocabulary=vocab,
        units=units,
        patient_ids=[k[0] for k in keep],
        visit_ids=[k[1] for k in keep],
        values=values,
        observed=observed,
        abnormal=abnormal,
        labels=np.array([k[3] for k in keep], dtype=bool).reshape(n, len(label_names)),
        notes=[notes.get(k[1], {}) for k in keep],
        split=np.array(split, dtype=object),
        label_names=list(label_names),
    )
    labtext = [render_abnormal_text(ds.panel(i), vocab, units) for i in range(n)]
    tr = ds.split_indices("train")
    if len(tr) == 0:
        raise RuntimeFailure("the train split is empty")
    stats = fit_normalization_arrays(values[tr], observed[tr])

    store = None
    if args.embeddings:
        store = load_embedding_store(args.embeddings)
        for row in store.rejected[:20]:
            log.warning("%s:%d: %s", args.embeddings, row.line, row.reason)
    if args.provider_url:
        if store is None:
            if args.d_text < 1:
                raise UsageError("--d-text is required with --provider-url and no --embeddings", key="--d-text")
            store = EmbeddingStore(d_text=args.d_text, provenance=args.provider_url)
        provider = EmbeddingProvider(store.d_text, http_transport(args.provider_url))
        for i in range(n):
            vid = ds.visit_ids[i]
            for section, text in sorted(ds.notes[i].items()):
                if store.get(vid, section) is None:
                    provider.embed_into(store, vid, section, text)
            if labtext[i] and store.get(vid, LABTEXT_SECTION) is None:
                provider.embed_into(store, vid, LABTEXT_SECTION, labtext[i])

    labtext_lines = "".join(
        json.dumps({"visit_id": v, "text": t}, sort_keys=True) + "\n" for v, t in zip(ds.visit_ids, labtext)
    )
    extra = {
        "labtext.jsonl": labtext_lines.encode(),
        "normalization.json": (json.dumps(stats.to_dict(), sort_keys=True) + "\n").encode(),
    }
    try:
        write_dataset(ds, args.out, embeddings=store, extra_files=extra)
    except DataError as exc:
        raise RuntimeFailure(str(exc)) from None
    dropped = sum(parsed.dropped_items.values())
    return (
        f"prepare: {n} visits, {len(parsed.errors)} bad lab rows, {dropped} out-of-vocabulary rows, "
        f"{parsed.duplicates} duplicates, {skipped} empty visits skipped, "
        f"{len(stats.excluded)} items excluded from normalization -> {args.out}"
    )


def cmd_render_labtext(args) -> str:
    from medfuse.ehr_data import LAB_CSV_HEADER, parse_lab_csv, render_abnormal_text

    raw = Path(args.panel).read_bytes()
    if args.vocab:
        vocab = _read_vocab(args.vocab)
    else:
        # vocabulary in order of first appearance
        reader = csv.reader(io.StringIO(raw.decode("utf-8")))
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != LAB_CSV_HEADER:
            raise RuntimeFailure(f"{args.panel}: invalid lab CSV header")
        vocab = list(dict.fromkeys(r[2] for r in reader if len(r) == len(LAB_CSV_HEADER)))
    parsed = parse_lab_csv(raw, vocab)
    if len(parsed.panels) != 1:
        raise UsageError(f"{args.panel}: expected exactly one visit, found {len(parsed.panels)}", key="--panel")
    return render_abnormal_text(parsed.panels[0][2], vocab, parsed.units)


def cmd_pretrain_mltm(args) -> str:
    from dataclasses import asdict

    from medfuse import checkpoint as ckpt_io
    from medfuse.ehr_data import normalize_arrays, read_dataset
    from medfuse.mltm import (
        MLTM,
        MltmConfig,
        TrainingDiverged,
        masked_value_mse,
        mltm_checkpoint,
        pretrain_dataset,
        sample_mask_arrays,
    )

    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg.mltm.seed)
    mcfg = MltmConfig(**{**asdict(cfg.mltm), "seed": seed})
    ds = read_dataset(args.data)
    budget = args.time_budget if args.time_budget > 0 else None
    try:
        ck, result = pretrain_dataset(ds, mcfg, seed=seed, log=log.info, time_budget=budget)
    except TrainingDiverged as exc:
        model = MLTM(mcfg)
        model.load_state_dict(exc.last_state)
        ckpt_io.save(f"{args.out}.last_finite", mltm_checkpoint(model, _fit_stats(ds, mcfg), exc.history, ds.vocabulary))
        raise RuntimeFailure(f"{exc}; last finite weights written to {args.out}.last_finite") from None
    ckpt_io.save(args.out, ck)

    summary = f"pretrain-mltm: {len(result.history)} epochs, final loss {result.history[-1]:.5f}"
    va = ds.split_indices("valid")
    if len(va):
        z, o = normalize_arrays(ds.values[va], ds.observed[va], result.stats)
        ok = o.sum(axis=1) >= 2
        if ok.any():
            z, o = z[ok], o[ok]
            masked = sample_mask_arrays(o, mcfg.mask_ratio, np.random.default_rng([seed, 3]))
            mse = masked_value_mse(result.model, z, o, masked)
            # column-mean imputation is 0 after normalization
            baseline = float(np.mean(z[masked] ** 2))
            summary += f", valid masked MSE {mse:.4f} (mean imputation {baseline:.4f})"
    return summary + f" -> {args.out}"


def _fit_stats(ds, mcfg):
    from medfuse.ehr_data import fit_normalization_arrays

    tr = ds.split_indices("train")
    return fit_normalization_arrays(ds.values[tr], ds.observed[tr], mcfg.min_support)


def cmd_train(args) -> str:
    from dataclasses import asdict

    from medfuse import checkpoint as ckpt_io
    from medfuse.ehr_data import read_dataset, read_manifest
    from medfuse.mltm import TrainingDiverged
    from medfuse.training import TrainConfig, train

    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg.train.seed)
    tc = TrainConfig(**{**asdict(cfg.train), "seed": seed})
    if tc.use_mltm and not args.mltm:
        raise UsageError("--mltm is required unless train.use_mltm = false", key="--mltm")
    data_dir = Path(args.data)
    ds = read_dataset(data_dir)
    store = _load_store(data_dir, read_manifest(data_dir))
    mltm_ck = ckpt_io.load(args.mltm, component="mltm") if args.mltm and tc.use_mltm else None
    resume = ckpt_io.load(args.resume, component="fusion") if args.resume else None
    try:
        ck = train(ds, mltm_ck, store, tc, cfg.fusion, resume=resume, log=log.info)
    except TrainingDiverged as exc:
        if isinstance(exc.last_state, ckpt_io.Checkpoint):
            ckpt_io.save(f"{args.out}.last_finite", exc.last_state)
        raise RuntimeFailure(f"{exc}; last finite checkpoint written to {args.out}.last_finite") from None
    ckpt_io.save(args.out, ck)
    last = ck.meta["history"][-1] if ck.meta["history"] else {}
    tail = f", final focal {last['focal']:.5f} mi {last['mi']:.4f}" if last else ""
    return f"train: {ck.meta['epoch']} epochs{tail}, config {ck.meta['config_hash']} -> {args.out}"


def cmd_evaluate(args) -> str:
    from medfuse import checkpoint as ckpt_io
    from medfuse.ehr_data import read_dataset, read_manifest
    from medfuse.training import TrainConfig, evaluate, metrics_record
    from medfuse.utils import atomic_write_text

    ck = ckpt_io.load(args.ckpt, component="fusion")
    data_dir = Path(args.data)
    ds = read_dataset(data_dir)
    store = _load_store(data_dir, read_manifest(data_dir))
    split = None if args.split == "all" else args.split
    threshold = args.threshold if args.threshold is not None else TrainConfig(**ck.config["train"]).threshold
    if not 0.0 <= threshold <= 1.0:
        raise UsageError("--threshold must be in [0, 1]", key="--threshold")
    try:
        report = evaluate(ck, ds, store, threshold=threshold, split=split)
    except ValueError as exc:
        raise UsageError(str(exc), key="--split") from None
    atomic_write_text(args.report, metrics_record(report, ck, threshold, split))
    h = report.headline()
    return (
        f"evaluate: {args.split} n={report.n_samples} f1_macro {h['f1_macro']:.4f} f1_weighted {h['f1_weighted']:.4f} "
        f"precision {h['precision']:.4f} recall {h['recall']:.4f} accuracy {h['accuracy']:.4f} -> {args.report}"
    )


def cmd_mi_bench(args) -> str:
    from medfuse.utils import atomic_write_text
    from medfuse.verify import mi_bench

    if not -1.0 < args.rho < 1.0:
        raise UsageError("--rho must lie strictly between -1 and 1", key="--rho")
    if args.dim < 1:
        raise UsageError("--dim must be >= 1", key="--dim")
    seed = _resolve_seed(args.seed, 0)
    res = mi_bench(args.rho, args.dim, seed, train_steps=args.steps, batch_size=args.batch_size, n_batches=args.batches)
    if args.report:
        atomic_write_text(args.report, json.dumps({**res.to_dict(), "seed": seed}, sort_keys=True) + "\n")
    return (
        f"mi-bench: rho {args.rho} dim {args.dim} seed {seed} estimate {res.estimate:.4f} "
        f"(sd {res.estimate_std:.4f}) analytic_mi {res.analytic_mi:.4f} club_limit {res.club_limit:.4f}"
    )


def cmd_gradcheck(args) -> str:
    import torch

    from medfuse.verify import GRADCHECK_TARGETS

    targets = list(GRADCHECK_TARGETS) if args.target == "all" else [args.target]
    dtype = torch.float64 if args.dtype == "float64" else torch.float32
    seed = _resolve_seed(args.seed, 0)
    parts, failed = [], []
    for name in targets:
        fn = GRADCHECK_TARGETS[name]
        rep = fn(seed=seed, dtype=dtype) if name == "focal" else fn(seed=seed)
        parts.append(f"{name} max_rel {rep.max_rel_error:.2e} tol {rep.tolerance:.0e} {'ok' if rep.passed else 'FAIL'}")
        if not rep.passed:
            failed.append(name)
    line = "gradcheck: " + "; ".join(parts)
    if failed:
        raise RuntimeFailure(line)
    return line


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    seed_help = f"random seed (default: ${SEED_ENV}, else the config value or 0)"
    p = _Parser(prog="medfuse", formatter_class=fmt, description="Multimodal EHR fusion: lab pretraining, text+lab fusion, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset with text embeddings", formatter_class=fmt)
    s.add_argument("--config", default=None, help="run config file ([data] section is used)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=None, help=seed_help)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="build a dataset directory from lab CSV, notes and labels", formatter_class=fmt)
    s.add_argument("--labs", required=True, help="lab events CSV (PATIENT_ID,VISIT_ID,ITEMID,VALUE,VALUEUOM,ABNORMAL)")
    s.add_argument("--notes", required=True, help='JSONL of {"visit_id", "sections": {header: text}}')
    s.add_argument("--vocab", required=True, help="lab item vocabulary, one ITEMID per line")
    s.add_argument("--labels", required=True, help="CSV PATIENT_ID,VISIT_ID[,SPLIT],<label columns> of 0/1")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--embeddings", default=None, help="existing embedding store to include")
    s.add_argument("--provider-url", default=None, help="embedding service URL for texts missing from the store")
    s.add_argument("--d-text", type=int, default=0, help="embedding width when no store is given")
    s.add_argument("--valid-fraction", type=float, default=0.2, help="share of patients held out when labels lack SPLIT")
    s.add_argument("--seed", type=int, default=None, help=seed_help)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("render-labtext", help="print the abnormal-results sentence for one visit", formatter_class=fmt)
    s.add_argument("--panel", required=True, help="lab CSV holding a single visit")
    s.add_argument("--vocab", default=None, help="vocabulary file fixing item order (default: order of appearance)")
    s.set_defaults(func=cmd_render_labtext)

    s = sub.add_parser("pretrain-mltm", help="pretrain the masked lab-test model", formatter_class=fmt)
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", default=None, help="run config file ([mltm] section is used)")
    s.add_argument("--out", required=True, help="output checkpoint")
    s.add_argument("--seed", type=int, default=None, help=seed_help)
    s.add_argument("--time-budget", type=float, default=0.0, help="stop after the epoch exceeding this many seconds (0: none)")
    s.set_defaults(func=cmd_pretrain_mltm)

    s = sub.add_parser("train", help="train the fusion model", formatter_class=fmt)
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--mltm", default=None, help="pretrained MLTM checkpoint (required when train.use_mltm)")
    s.add_argument("--config", default=None, help="run config file ([fusion] and [train] sections are used)")
    s.add_argument("--out", required=True, help="output checkpoint")
    s.add_argument("--seed", type=int, default=None, help=seed_help)
    s.add_argument("--resume", default=None, help="fusion checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a fusion checkpoint", formatter_class=fmt)
    s.add_argument("--ckpt", required=True, help="fusion checkpoint")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--report", required=True, help="output metrics file (one JSON object)")
    s.add_argument("--threshold", type=float, default=None, help="decision threshold (default: train.threshold)")
    s.add_argument("--split", default="valid", help="split to score, or 'all'")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("mi-bench", help="vCLUB estimate on correlated Gaussians vs analytic MI", formatter_class=fmt)
    s.add_argument("--rho", type=float, required=True, help="per-dimension correlation")
    s.add_argument("--dim", type=int, default=1, help="dimension of x and y")
    s.add_argument("--seed", type=int, default=None, help=seed_help)
    s.add_argument("--steps", type=int, default=2000, help="estimator training steps")
    s.add_argument("--batch-size", type=int, default=256, help="samples per batch")
    s.add_argument("--batches", type=int, default=100, help="fresh batches averaged for the estimate")
    s.add_argument("--report", default=None, help="optional JSON output file")
    s.set_defaults(func=cmd_mi_bench)

    s = sub.add_parser("gradcheck", help="autograd vs central finite differences", formatter_class=fmt)
    s.add_argument("--target", required=True, choices=["focal", "vclub", "forward", "all"], help="function to check")
    s.add_argument("--dtype", default="float64", choices=["float64", "float32"], help="precision (float32 applies to focal)")
    s.add_argument("--seed", type=int, default=None, help=seed_help)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _emit_error(kind: str, message: str, code: int, key: str | None = None) -> int:
    record = {"error": kind, "message": message, "exit_code": code}
    if key:
        record["key"] = key
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    from medfuse import checkpoint as ckpt_io
    from medfuse.config import ConfigFileError
    from medfuse.ehr_data import DataError
    from medfuse.fusion import ConfigError as FusionConfigError
    from medfuse.mltm import ConfigError as MltmConfigError
    from medfuse.text_embed import ProviderDimensionError, ProviderError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _emit_error("usage", str(exc), 1)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)

    start = time.perf_counter()
    try:
        summary = args.func(args)
    except UsageError as exc:
        return _emit_error("usage", str(exc), 1, exc.key)
    except ConfigFileError as exc:
        return _emit_error("config", str(exc), 1, exc.key)
    except (FusionConfigError, MltmConfigError) as exc:
        key = str(exc).split()[0].rstrip(":")
        return _emit_error("config", str(exc), 1, key if "." in key else None)
    except (RuntimeFailure, DataError, ckpt_io.CheckpointError, ProviderError, ProviderDimensionError) as exc:
        return _emit_error("runtime", str(exc), 2)
    except OSError as exc:
        return _emit_error("io", str(exc), 2)
    print(summary)
    log.info("done in %.1fs", time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
