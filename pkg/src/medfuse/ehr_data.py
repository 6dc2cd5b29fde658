"""EHR data model, lab-table ingestion, normalization, note filtering and
synthetic data generation."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from medfuse.utils import atomic_write_bytes, atomic_write_text

LAB_CSV_HEADER = ("PATIENT_ID", "VISIT_ID", "ITEMID", "VALUE", "VALUEUOM", "ABNORMAL")

NOTE_SECTIONS = ("ChiefComplaint", "PresentIllness", "MedicalHistory", "MedicationOnAdmission")
LABTEXT_SECTION = "LabText"
# Order of text tokens fed to the fusion model.
TEXT_SECTIONS = NOTE_SECTIONS + (LABTEXT_SECTION,)

LABTEXT_PREFIX = "These are abnormal results recorded: "

# Normalized header -> canonical section.
_SECTION_ALIASES = {
    "chief complaint": "ChiefComplaint",
    "chiefcomplaint": "ChiefComplaint",
    "present illness": "PresentIllness",
    "history of present illness": "PresentIllness",
    "presentillness": "PresentIllness",
    "medical history": "MedicalHistory",
    "past medical history": "MedicalHistory",
    "medicalhistory": "MedicalHistory",
    "medication on admission": "MedicationOnAdmission",
    "medications on admission": "MedicationOnAdmission",
    "medicationonadmission": "MedicationOnAdmission",
}

DATASET_FORMAT = "medfuse-dataset"
DATASET_VERSION = 1


class DataError(ValueError):
    """Invalid input data or configuration."""


@dataclass(frozen=True)
class LabObservation:
    item_id: str
    value: float
    unit: str
    abnormal: bool = False

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise DataError(f"non-finite value for {self.item_id}: {self.value!r}")
        if not self.unit:
            raise DataError(f"missing unit for {self.item_id}")


@dataclass
class LabPanel:
    """Lab values over a fixed vocabulary.

    ``values[i]`` is only meaningful where ``observed[i]``; unobserved slots
    hold 0.0 and are never read.
    """

    values: np.ndarray
    observed: np.ndarray
    abnormal: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        self.abnormal = np.asarray(self.abnormal, dtype=bool)
        if not (self.values.shape == self.observed.shape == self.abnormal.shape) or self.values.ndim != 1:
            raise DataError("panel vectors must share one length")
        if np.any(self.abnormal & ~self.observed):
            raise DataError("abnormal flag set on an unobserved item")
        if not np.all(np.isfinite(self.values[self.observed])):
            raise DataError("non-finite observed lab value")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def observed_idx(self) -> np.ndarray:
        return np.flatnonzero(self.observed)

    @classmethod
    def empty(cls, size: int) -> "LabPanel":
        return cls(np.zeros(size), np.zeros(size, bool), np.zeros(size, bool))

    @classmethod
    def from_observations(cls, observations: Iterable[LabObservation], vocabulary: Sequence[str]) -> "LabPanel":
        index = {item: i for i, item in enumerate(vocabulary)}
        panel = cls.empty(len(vocabulary))
        for obs in observations:
            i = index[obs.item_id]
            panel.values[i] = obs.value
            panel.observed[i] = True
            panel.abnormal[i] = obs.abnormal
        return panel

    def equals(self, other: "LabPanel") -> bool:
        m = self.observed
        return (
            np.array_equal(m, other.observed)
            and np.array_equal(self.abnormal, other.abnormal)
            and np.array_equal(self.values[m], other.values[m])
        )


@dataclass
class VisitRecord:
    patient_id: str
    visit_id: str
    note_sections: dict[str, str]
    panel: LabPanel
    labels: np.ndarray

    def __post_init__(self):
        unknown = set(self.note_sections) - set(NOTE_SECTIONS)
        if unknown:
            raise DataError(f"non-canonical note sections: {sorted(unknown)}")
        self.labels = np.asarray(self.labels, dtype=bool)
        if not self.note_sections and not self.panel.observed.any():
            raise DataError(f"visit {self.visit_id} has neither notes nor lab values")


@dataclass
class RowError:
    line: int
    reason: str


@dataclass
class LabParseResult:
    panels: list[tuple[str, str, LabPanel]]
    errors: list[RowError] = field(default_factory=list)
    dropped_items: Counter = field(default_factory=Counter)
    duplicates: int = 0
    units: dict[str, str] = field(default_factory=dict)


def parse_lab_csv(source: IO[bytes] | IO[str] | bytes | str, vocabulary: Sequence[str]) -> LabParseResult:
    """Group a lab-event table into one panel per (patient, visit).

    Malformed rows are reported and skipped; only a bad header raises.
    Later rows for the same (visit, item) overwrite earlier ones.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != LAB_CSV_HEADER:
        raise DataError(f"invalid lab CSV header: {header!r}; expected {','.join(LAB_CSV_HEADER)}")

    index = {item: i for i, item in enumerate(vocabulary)}
    D = len(vocabulary)
    result = LabParseResult(panels=[])
    grouped: dict[tuple[str, str], LabPanel] = {}
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(LAB_CSV_HEADER):
            result.errors.append(RowError(line_no, f"expected {len(LAB_CSV_HEADER)} fields, got {len(row)}"))
            continue
        pid, vid, item, value_s, unit, abn_s = (c.strip() for c in row)
        try:
            value = float(value_s)
        except ValueError:
            result.errors.append(RowError(line_no, f"non-numeric VALUE {value_s!r}"))
            continue
        if not math.isfinite(value):
            result.errors.append(RowError(line_no, f"non-finite VALUE {value_s!r}"))
            continue
        if not unit:
            result.errors.append(RowError(line_no, "empty VALUEUOM"))
            continue
        if abn_s not in ("0", "1"):
            result.errors.append(RowError(line_no, f"ABNORMAL must be 0 or 1, got {abn_s!r}"))
            continue
        if item not in index:
            result.dropped_items[item] += 1
            continue
        panel = grouped.get((pid, vid))
        if panel is None:
            panel = grouped[(pid, vid)] = LabPanel.empty(D)
        i = index[item]
        if panel.observed[i]:
            result.duplicates += 1
        panel.values[i] = value
        panel.observed[i] = True
        panel.abnormal[i] = abn_s == "1"
        result.units.setdefault(item, unit)
    result.panels = [(pid, vid, p) for (pid, vid), p in grouped.items()]
    return result


def format_value(value: float) -> str:
    """Shortest exact decimal text; integral values drop the trailing '.0'."""
    if float(value).is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(float(value))


def write_lab_csv(rows: Iterable[tuple[str, str, str, float, str, bool]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LAB_CSV_HEADER)
    for pid, vid, item, value, unit, abnormal in rows:
        writer.writerow([pid, vid, item, repr(float(value)), unit, "1" if abnormal else "0"])
    return buf.getvalue()


# -- normalization -----------------------------------------------------------

@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    excluded: frozenset[int]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "excluded": sorted(self.excluded)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormalizationStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), frozenset(int(i) for i in d["excluded"]))

    @property
    def keep(self) -> np.ndarray:
        keep = np.ones(self.mean.shape[0], bool)
        keep[list(self.excluded)] = False
        return keep


def fit_normalization_arrays(values: np.ndarray, observed: np.ndarray, min_support: int = 2) -> NormalizationStats:
    """Per-item mean and population std over observed entries only."""
    values = np.where(observed, values, 0.0)
    count = observed.sum(axis=0)
    safe = np.maximum(count, 1)
    mean = values.sum(axis=0) / safe
    dev = np.where(observed, values - mean, 0.0)
    std = np.sqrt((dev**2).sum(axis=0) / safe)
    excluded = (count < max(min_support, 1)) | ~(std > 0)
    std = np.where(excluded, 1.0, std)
    mean = np.where(count > 0, mean, 0.0)
    return NormalizationStats(mean, std, frozenset(np.flatnonzero(excluded).tolist()))


def fit_normalization(panels: Sequence[LabPanel], min_support: int = 2) -> NormalizationStats:
    if not panels:
        raise DataError("fit_normalization needs at least one panel")
    values = np.stack([p.values for p in panels])
    observed = np.stack([p.observed for p in panels])
    return fit_normalization_arrays(values, observed, min_support)


def normalize_arrays(values: np.ndarray, observed: np.ndarray, stats: NormalizationStats):
    """z-score observed values; excluded items become unobserved."""
    observed = observed & stats.keep
    z = np.where(observed, (values - stats.mean) / stats.std, 0.0)
    return z, observed


def apply_normalization(panel: LabPanel, stats: NormalizationStats) -> LabPanel:
    z, observed = normalize_arrays(panel.values, panel.observed, stats)
    return LabPanel(z, observed, panel.abnormal & observed)


def invert_normalization(panel: LabPanel, stats: NormalizationStats) -> LabPanel:
    raw = np.where(panel.observed, panel.values * stats.std + stats.mean, 0.0)
    return LabPanel(raw, panel.observed.copy(), panel.abnormal.copy())


# -- text --------------------------------------------------------------------

def render_abnormal_text(panel: LabPanel, vocabulary: Sequence[str], units: Mapping[str, str]) -> str:
    """Template sentence listing the abnormal observed items in vocabulary order.

    Values are printed at their raw magnitude, so pass an un-normalized panel.
    """
    idx = np.flatnonzero(panel.abnormal & panel.observed)
    if idx.size == 0:
        return ""
    items = [f"ITEMID {vocabulary[i]}: {format_value(panel.values[i])} {units[vocabulary[i]]}" for i in idx]
    return LABTEXT_PREFIX + "; ".join(items) + ";"


def canonical_section(header: str) -> str | None:
    key = re.sub(r"[^\w\s]", " ", header.lower()).replace("_", " ")
    key = " ".join(key.split())
    return _SECTION_ALIASES.get(key)


def filter_note_sections(raw_sections: Mapping[str, str]) -> dict[str, str]:
    """Keep only the four canonical note sections, keyed by canonical name."""
    out = {}
    for header, text in raw_sections.items():
        name = canonical_section(header)
        if name is not None:
            out[name] = text
    return {s: out[s] for s in NOTE_SECTIONS if s in out}


# -- dataset -----------------------------------------------------------------

@dataclass
class EHRDataset:
    """Columnar container for a set of visits sharing one lab vocabulary."""

    vocabulary: list[str]
    units: dict[str, str]
    patient_ids: list[str]
    visit_ids: list[str]
    values: np.ndarray  # (n, D), raw magnitudes
    observed: np.ndarray  # (n, D)
    abnormal: np.ndarray  # (n, D)
    labels: np.ndarray  # (n, L) bool
    notes: list[dict[str, str]]
    split: np.ndarray  # (n,) str: "train" / "valid"
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.visit_ids)
        if not (len(self.patient_ids) == n == self.values.shape[0] == self.labels.shape[0] == len(self.notes)):
            raise DataError("dataset columns have inconsistent lengths")
        if not self.label_names:
            self.label_names = [f"label_{j}" for j in range(self.labels.shape[1])]
        self.split = np.asarray(self.split, dtype=object)

    def __len__(self) -> int:
        return len(self.visit_ids)

    @property
    def n_labels(self) -> int:
        return self.labels.shape[1]

    def panel(self, i: int) -> LabPanel:
        return LabPanel(self.values[i], self.observed[i], self.abnormal[i])

    def visit(self, i: int) -> VisitRecord:
        return VisitRecord(self.patient_ids[i], self.visit_ids[i], dict(self.notes[i]), self.panel(i), self.labels[i])

    def subset(self, idx: np.ndarray) -> "EHRDataset":
        idx = np.asarray(idx, dtype=int)
        return EHRDataset(
            vocabulary=list(self.vocabulary),
            units=dict(self.units),
            patient_ids=[self.patient_ids[i] for i in idx],
            visit_ids=[self.visit_ids[i] for i in idx],
            values=self.values[idx],
            observed=self.observed[idx],
            abnormal=self.abnormal[idx],
            labels=self.labels[idx],
            notes=[self.notes[i] for i in idx],
            split=self.split[idx],
            label_names=list(self.label_names),
        )

    def split_indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == name)

    def labtext(self, i: int) -> str:
        return render_abnormal_text(self.panel(i), self.vocabulary, self.units)


def write_dataset(ds: EHRDataset, out_dir: str | Path, embeddings=None, extra_files: Mapping[str, bytes] | None = None) -> Path:
    """Write the dataset directory: manifest, lab CSV, notes, labels and
    (optionally) an embedding store."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        for j in np.flatnonzero(ds.observed[i]):
            item = ds.vocabulary[j]
            rows.append((ds.patient_ids[i], ds.visit_ids[i], item, ds.values[i, j], ds.units[item], ds.abnormal[i, j]))
    atomic_write_text(out / "labs.csv", write_lab_csv(rows))

    notes = "".join(
        json.dumps({"visit_id": v, "sections": s}, sort_keys=True) + "\n" for v, s in zip(ds.visit_ids, ds.notes)
    )
    atomic_write_text(out / "notes.jsonl", notes)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["PATIENT_ID", "VISIT_ID", "SPLIT", *ds.label_names])
    for i in range(len(ds)):
        writer.writerow([ds.patient_ids[i], ds.visit_ids[i], ds.split[i], *(int(b) for b in ds.labels[i])])
    atomic_write_text(out / "labels.csv", buf.getvalue())

    files = {"labs": "labs.csv", "notes": "notes.jsonl", "labels": "labels.csv"}
    if embeddings is not None:
        from medfuse.text_embed import save_embedding_store

        save_embedding_store(embeddings, out / "embeddings.emb")
        files["embeddings"] = "embeddings.emb"
    for name, payload in (extra_files or {}).items():
        atomic_write_bytes(out / name, payload)
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "vocabulary": list(ds.vocabulary),
        "units": {k: ds.units[k] for k in ds.vocabulary},
        "n_labels": ds.n_labels,
        "label_names": list(ds.label_names),
        "files": files,
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset manifest")
    return manifest


def read_dataset(data_dir: str | Path) -> EHRDataset:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    vocab = manifest["vocabulary"]
    files = manifest["files"]
    L = int(manifest["n_labels"])

    with open(data_dir / files["labels"], newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["PATIENT_ID", "VISIT_ID", "SPLIT"] or len(header) != 3 + L:
            raise DataError(f"invalid labels header: {header!r}")
        label_rows = [r for r in reader if r]
    pids = [r[0] for r in label_rows]
    vids = [r[1] for r in label_rows]
    split = [r[2] for r in label_rows]
    labels = np.array([[c == "1" for c in r[3:]] for r in label_rows], dtype=bool).reshape(len(label_rows), L)

    parsed = parse_lab_csv((data_dir / files["labs"]).read_bytes(), vocab)
    if parsed.errors:
        first = parsed.errors[0]
        raise DataError(f"{files['labs']}:{first.line}: {first.reason}")
    n, D = len(vids), len(vocab)
    values = np.zeros((n, D))
    observed = np.zeros((n, D), bool)
    abnormal = np.zeros((n, D), bool)
    row_of = {(p, v): i for i, (p, v) in enumerate(zip(pids, vids))}
    for pid, vid, panel in parsed.panels:
        i = row_of.get((pid, vid))
        if i is None:
            raise DataError(f"lab rows for unknown visit {pid}/{vid}")
        values[i], observed[i], abnormal[i] = panel.values, panel.observed, panel.abnormal

    notes_by_visit = {}
    for line in (data_dir / files["notes"]).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            notes_by_visit[rec["visit_id"]] = dict(rec["sections"])
    notes = [notes_by_visit.get(v, {}) for v in vids]
    return EHRDataset(
        vocabulary=list(vocab),
        units=dict(manifest["units"]),
        patient_ids=pids,
        visit_ids=vids,
        values=values,
        observed=observed,
        abnormal=abnormal,
        labels=labels,
        notes=notes,
        split=np.array(split, dtype=object),
        label_names=list(manifest.get("label_names") or []),
    )


# -- synthetic generator -----------------------------------------------------

@dataclass
class GenConfig:
    """Synthetic EHR generator settings."""

    n_samples: int = 2000
    n_items: int = 32  # D
    n_labels: int = 10  # L
    k_shared: int = 2
    k_lab: int = 2
    k_text: int = 2
    noise: float = 0.1
    text_noise: float = 0.1
    missing_rate: float = 0.2
    d_text: int = 32
    section_rate: float = 0.9
    label_scale: float = 3.0
    valid_fraction: float = 0.2

    def validate(self) -> None:
        for name in ("n_samples", "n_items", "n_labels", "d_text"):
            if getattr(self, name) < 1:
                raise DataError(f"data.{name} must be >= 1")
        for name in ("k_shared", "k_lab", "k_text"):
            if getattr(self, name) < 0:
                raise DataError(f"data.{name} must be >= 0")
        if self.k_shared + self.k_lab + self.k_text == 0:
            raise DataError("data: at least one latent dimension is required")
        for name in ("noise", "text_noise", "label_scale"):
            if not getattr(self, name) >= 0:
                raise DataError(f"data.{name} must be >= 0")
        for name in ("missing_rate", "valid_fraction"):
            if not 0 <= getattr(self, name) < 1:
                raise DataError(f"data.{name} must be in [0, 1)")
        if not 0 <= self.section_rate <= 1:
            raise DataError("data.section_rate must be in [0, 1]")


@dataclass
class SyntheticData:
    dataset: EHRDataset
    embeddings: "object"  # EmbeddingStore
    z_shared: np.ndarray
    z_lab: np.ndarray
    z_text: np.ndarray
    label_weights: np.ndarray  # (L, k_shared + k_lab + k_text)
    label_bias: np.ndarray
    lab_clean: np.ndarray  # noiseless standardized lab signal (n, D)


def synth_generate(cfg: GenConfig, rng: np.random.Generator | int) -> SyntheticData:
    """Draw a synthetic dataset from a linear-Gaussian latent model.

    Shared latents feed both modalities, lab-only and text-only latents feed
    one each, and all three drive the labels.  Every draw comes from ``rng``
    in a fixed order, so a seed fully determines the output.
    """
    from medfuse.text_embed import EmbeddingStore

    cfg.validate()
    rng = np.random.default_rng(rng)
    n, D, L = cfg.n_samples, cfg.n_items, cfg.n_labels
    ks, kl, kt = cfg.k_shared, cfg.k_lab, cfg.k_text

    z_s = rng.standard_normal((n, ks))
    z_l = rng.standard_normal((n, kl))
    z_t = rng.standard_normal((n, kt))

    k_lab_in = ks + kl
    W_lab = rng.standard_normal((D, k_lab_in)) / math.sqrt(max(k_lab_in, 1))
    lab_clean = np.concatenate([z_s, z_l], axis=1) @ W_lab.T
    lab_signal = lab_clean + cfg.noise * rng.standard_normal((n, D))
    # population std of each item under the generative model
    item_sd = np.sqrt((W_lab**2).sum(axis=1) + cfg.noise**2)
    item_sd = np.where(item_sd > 0, item_sd, 1.0)
    loc = np.round(rng.uniform(20.0, 200.0, D), 1)
    scale = np.round(rng.uniform(2.0, 30.0, D), 1)
    values = loc + scale * lab_signal
    observed = rng.random((n, D)) >= cfg.missing_rate
    abnormal = observed & (np.abs(lab_signal / item_sd) > 2.0)
    values = np.where(observed, values, 0.0)

    k_txt_in = ks + kt
    z_txt_in = np.concatenate([z_s, z_t], axis=1)
    sec_W = rng.standard_normal((len(NOTE_SECTIONS), cfg.d_text, k_txt_in)) / math.sqrt(max(k_txt_in, 1))
    sec_present = rng.random((n, len(NOTE_SECTIONS))) < cfg.section_rate
    sec_noise = rng.standard_normal((n, len(NOTE_SECTIONS), cfg.d_text))
    W_labtext = rng.standard_normal((cfg.d_text, D)) / math.sqrt(D)
    labtext_noise = rng.standard_normal((n, cfg.d_text))

    U = rng.standard_normal((L, ks + kl + kt))
    U *= cfg.label_scale / np.maximum(np.linalg.norm(U, axis=1, keepdims=True), 1e-12)
    bias = rng.uniform(-1.5, 0.0, L)
    logits = np.concatenate([z_s, z_l, z_t], axis=1) @ U.T + bias
    labels = rng.random((n, L)) < 1.0 / (1.0 + np.exp(-logits))

    perm = rng.permutation(n)
    n_valid = int(round(cfg.valid_fraction * n))
    split = np.full(n, "train", dtype=object)
    split[perm[:n_valid]] = "valid"

    vocab = [f"LAB{j:03d}" for j in range(D)]
    unit_choices = ("mg/dL", "mmol/L", "U/L", "g/dL", "mEq/L", "%")
    units = {item: unit_choices[j % len(unit_choices)] for j, item in enumerate(vocab)}
    visit_ids = [f"V{i:06d}" for i in range(n)]
    patient_ids = [f"P{i // 2:06d}" for i in range(n)]

    store = EmbeddingStore(d_text=cfg.d_text, provenance="synthetic")
    notes = []
    abn_signal = np.where(abnormal, lab_signal / item_sd, 0.0)
    for i in range(n):
        sections = {}
        for s, name in enumerate(NOTE_SECTIONS):
            if sec_present[i, s]:
                sections[name] = f"synthetic {name} note for {visit_ids[i]}"
                vec = sec_W[s] @ z_txt_in[i] + cfg.text_noise * sec_noise[i, s]
                store.add(visit_ids[i], name, vec)
        notes.append(sections)
        if abnormal[i].any():
            vec = W_labtext @ abn_signal[i] + cfg.text_noise * labtext_noise[i]
            store.add(visit_ids[i], LABTEXT_SECTION, vec)

    ds = EHRDataset(
        vocabulary=vocab,
        units=units,
        patient_ids=patient_ids,
        visit_ids=visit_ids,
        values=values,
        observed=observed,
        abnormal=abnormal,
        labels=labels,
        notes=notes,
        split=split,
        label_names=[f"disease_{j}" for j in range(L)],
    )
    return SyntheticData(ds, store, z_s, z_l, z_t, U, bias, lab_clean)


def gen_config_dict(cfg: GenConfig) -> dict:
    return asdict(cfg)
