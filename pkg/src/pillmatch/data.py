"""Synthetic pill-prescription datasets: generation, scenario splits, and IO.

A dataset is a class table (names, synonyms, visual prototypes) plus a list of
prescription samples. Each sample lays text boxes out on a column-structured
grid (pill-name lines on the left, quantities to their right, headers and
instruction lines as distractors) and carries pill feature vectors drawn as
class prototype plus gaussian noise. Everything is deterministic given a seed.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

__all__ = [
    "GeneratorConfig", "PillClass", "Pill", "BoxRecord", "PrescriptionSample",
    "DatasetMeta", "Dataset", "ScenarioSplit", "DataFormatError",
    "SCENARIOS", "generate_dataset", "split_scenario", "realize_split",
    "inject_mismatches", "save_dataset", "load_dataset",
    "save_samples", "load_samples", "validate_sample", "vocabulary_tokens",
]

logger = logging.getLogger(__name__)

SCENARIOS = ("1-1", "1-2", "1-3", "2-1", "2-2")


class DataFormatError(ValueError):
    """A dataset file failed structural validation."""


@dataclass
class GeneratorConfig:
    num_classes: int = 40
    num_prescriptions: int = 200
    pills_per_prescription: tuple[int, int] = (2, 6)
    distractors_per_prescription: tuple[int, int] = (4, 10)
    feature_dim: int = 16
    noise_sigma: float = 0.02
    synonym_prob: float = 0.3
    min_prototype_distance: float = 0.35
    row_height: float = 34.0
    row_jitter: float = 3.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"generator: need at least 2 classes, got {self.num_classes}")
        lo, hi = self.pills_per_prescription
        if not (1 <= lo <= hi):
            raise ValueError(f"generator: bad pills-per-prescription range ({lo}, {hi})")
        if hi > self.num_classes:
            raise ValueError(
                f"generator: up to {hi} pills per prescription but only "
                f"{self.num_classes} classes")
        dlo, dhi = self.distractors_per_prescription
        if not (0 <= dlo <= dhi):
            raise ValueError(f"generator: bad distractor range ({dlo}, {dhi})")
        if self.feature_dim < 1:
            raise ValueError("generator: feature_dim must be positive")
        if self.noise_sigma < 0:
            raise ValueError("generator: noise_sigma must be >= 0")


@dataclass
class PillClass:
    class_id: int
    name_tokens: tuple[str, ...]
    prototype: np.ndarray
    synonyms: tuple[tuple[str, ...], ...] = ()

    def name_forms(self) -> tuple[tuple[str, ...], ...]:
        return (self.name_tokens,) + tuple(self.synonyms)


@dataclass
class Pill:
    pill_id: int
    features: np.ndarray
    class_id: int
    prescribed: bool = True


@dataclass
class BoxRecord:
    """Serialized text box: raw text; token ids are derived at encode time."""

    box_id: int
    bbox: tuple[float, float, float, float]
    text: str
    is_pill_name: bool = False
    pill_class: int | None = None


@dataclass
class PrescriptionSample:
    sample_id: int
    boxes: list[BoxRecord]
    pills: list[Pill]

    def class_set(self) -> frozenset[int]:
        """Classes named by the prescription's text boxes."""
        return frozenset(b.pill_class for b in self.boxes if b.pill_class is not None)

    def labels(self) -> np.ndarray:
        return np.array([b.is_pill_name for b in self.boxes], dtype=bool)

    def correspondence(self) -> list[frozenset[int]]:
        """P_i for each pill: indices of boxes naming the pill's class."""
        return [frozenset(j for j, b in enumerate(self.boxes)
                          if b.pill_class == pill.class_id)
                for pill in self.pills]


@dataclass
class DatasetMeta:
    config: GeneratorConfig
    seed: int
    classes: list[PillClass]
    distractor_tokens: list[str]


@dataclass
class Dataset:
    meta: DatasetMeta
    samples: list[PrescriptionSample]

    def by_id(self, sample_ids) -> list[PrescriptionSample]:
        index = {s.sample_id: s for s in self.samples}
        return [index[i] for i in sample_ids]


@dataclass
class ScenarioSplit:
    scenario: str
    seed: int
    train_ids: list[int]
    test_ids: list[int]
    mismatch_fraction: float = 0.0
    mismatch_mode: str | None = None


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

_SYLLABLES = ["al", "bro", "cet", "dor", "fen", "gra", "hex", "lin", "mar",
              "nol", "pra", "qui", "ral", "sal", "tor", "vex", "zan", "mib",
              "oxa", "pil"]
_SUFFIXES = ["ol", "ine", "ate", "il", "ax", "um"]
_DOSES = ["5mg", "10mg", "20mg", "25mg", "50mg", "100mg", "250mg", "500mg"]

_HEADER_WORDS = ["clinic", "hospital", "prescription", "patient", "record",
                 "department", "general"]
_DIAGNOSIS_WORDS = ["diagnosis", "acute", "chronic", "mild", "seasonal",
                    "followup", "routine"]
_INSTRUCTION_WORDS = ["take", "after", "before", "meal", "morning", "noon",
                      "evening", "daily", "with", "water", "days", "oral"]
_QUANTITY_UNITS = ["tablets", "capsules", "pills", "sachets"]


def _make_word(rng: np.random.Generator) -> str:
    n = int(rng.integers(2, 4))
    word = "".join(rng.choice(_SYLLABLES) for _ in range(n))
    if rng.random() < 0.5:
        word += str(rng.choice(_SUFFIXES))
    return word


def _make_class_names(rng: np.random.Generator, num_classes: int
                      ) -> list[tuple[tuple[str, ...], tuple[tuple[str, ...], ...]]]:
    """Unique canonical name plus one synonym form per class."""
    used: set[str] = set()
    names = []
    for _ in range(num_classes):
        for _attempt in range(1000):
            word = _make_word(rng)
            dose = str(rng.choice(_DOSES))
            canonical: tuple[str, ...]
            style = int(rng.integers(0, 3))
            if style == 0:
                canonical = (word,)
            elif style == 1:
                canonical = (word, dose)
            else:
                canonical = (word, _make_word(rng), dose)
            synonym_style = int(rng.integers(0, 2))
            if synonym_style == 0:
                synonym = (word[: max(3, len(word) // 2)] + ".",) + canonical[1:]
            else:
                synonym = (_make_word(rng),) + canonical[1:]
            keys = {" ".join(canonical), " ".join(synonym)}
            if len(keys) == 2 and not (keys & used):
                used |= keys
                names.append((canonical, (synonym,)))
                break
        else:
            raise RuntimeError("class name generation failed to find a unique name")
    return names


def _make_prototypes(rng: np.random.Generator, num_classes: int, dim: int,
                     min_distance: float) -> np.ndarray:
    protos = np.zeros((num_classes, dim), dtype=np.float64)
    for c in range(num_classes):
        for _attempt in range(1000):
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            if c == 0 or np.linalg.norm(protos[:c] - v, axis=1).min() >= min_distance:
                protos[c] = v
                break
        else:
            raise RuntimeError(
                f"could not place {num_classes} prototypes at pairwise distance "
                f">= {min_distance} in {dim} dims")
    return protos


def _distractor_text(kind: str, rng: np.random.Generator) -> str:
    if kind == "header":
        words = rng.choice(_HEADER_WORDS, size=int(rng.integers(2, 4)), replace=False)
    elif kind == "diagnosis":
        words = rng.choice(_DIAGNOSIS_WORDS, size=int(rng.integers(2, 4)), replace=False)
    elif kind == "quantity":
        count = int(rng.integers(1, 31))
        words = [f"x{count}", str(rng.choice(_QUANTITY_UNITS))]
    elif kind == "instruction":
        words = rng.choice(_INSTRUCTION_WORDS, size=int(rng.integers(2, 5)), replace=False)
    else:  # footer
        words = ["signature", str(rng.choice(_HEADER_WORDS))]
    return " ".join(str(w) for w in words)


def _box_width(text: str) -> float:
    return 8.0 * len(text) + 16.0


def _build_layout(sample_id: int, class_ids: list[int], name_texts: list[str],
                  n_distractors: int, rng: np.random.Generator,
                  config: GeneratorConfig) -> list[BoxRecord]:
    """Place boxes on a jittered grid; returns records in reading order."""
    boxes: list[tuple[float, float, str, bool, int | None]] = []  # (x, y, text, is_name, class)
    row_h = config.row_height
    jit = config.row_jitter

    budget = n_distractors
    quantity_rows = min(len(class_ids), max(0, budget - 2))
    budget -= quantity_rows
    has_header = budget > 0
    budget -= 1 if has_header else 0
    has_footer = budget > 0
    budget -= 1 if has_footer else 0
    has_diagnosis = budget > 0
    budget -= 1 if has_diagnosis else 0
    n_instructions = budget

    y = 12.0
    if has_header:
        boxes.append((30.0 + rng.uniform(-2, 2), y, _distractor_text("header", rng), False, None))
        y += row_h
    if has_diagnosis:
        boxes.append((30.0 + rng.uniform(-2, 2), y, _distractor_text("diagnosis", rng), False, None))
        y += row_h

    instructions_left = n_instructions
    for r, (cid, text) in enumerate(zip(class_ids, name_texts)):
        row_y = y + rng.uniform(-jit, jit)
        x_name = 30.0 + rng.uniform(-2, 2)
        boxes.append((x_name, row_y, text, True, cid))
        if r < quantity_rows:
            qx = x_name + _box_width(text) + 25.0 + rng.uniform(0, 8)
            boxes.append((qx, row_y, _distractor_text("quantity", rng), False, None))
        y += row_h
        if instructions_left > 0 and rng.random() < 0.6:
            boxes.append((46.0 + rng.uniform(-2, 2), y + rng.uniform(-jit, jit),
                          _distractor_text("instruction", rng), False, None))
            instructions_left -= 1
            y += row_h
    while instructions_left > 0:
        boxes.append((46.0 + rng.uniform(-2, 2), y + rng.uniform(-jit, jit),
                      _distractor_text("instruction", rng), False, None))
        instructions_left -= 1
        y += row_h
    if has_footer:
        boxes.append((30.0 + rng.uniform(-2, 2), y + row_h, _distractor_text("footer", rng),
                      False, None))

    records = []
    for i, (x, y0, text, is_name, cid) in enumerate(boxes):
        records.append(BoxRecord(
            box_id=i,
            bbox=(float(x), float(y0), float(x + _box_width(text)), float(y0 + 20.0)),
            text=text,
            is_pill_name=is_name,
            pill_class=cid,
        ))
    return records


def generate_dataset(config: GeneratorConfig, seed: int) -> Dataset:
    """Build the full synthetic dataset deterministically from the seed."""
    rng_names = np.random.default_rng([seed, 1])
    rng_protos = np.random.default_rng([seed, 2])
    rng_struct = np.random.default_rng([seed, 3])
    rng_layout = np.random.default_rng([seed, 4])
    rng_noise = np.random.default_rng([seed, 5])

    names = _make_class_names(rng_names, config.num_classes)
    protos = _make_prototypes(rng_protos, config.num_classes, config.feature_dim,
                              config.min_prototype_distance)
    classes = [PillClass(c, names[c][0], protos[c], names[c][1])
               for c in range(config.num_classes)]

    samples = []
    lo, hi = config.pills_per_prescription
    dlo, dhi = config.distractors_per_prescription
    for sid in range(config.num_prescriptions):
        n_pills = int(rng_struct.integers(lo, hi + 1))
        class_ids = [int(c) for c in rng_struct.choice(config.num_classes,
                                                       size=n_pills, replace=False)]
        name_texts = []
        for cid in class_ids:
            forms = classes[cid].name_forms()
            use_synonym = len(forms) > 1 and rng_struct.random() < config.synonym_prob
            name_texts.append(" ".join(forms[1] if use_synonym else forms[0]))
        n_distractors = int(rng_struct.integers(dlo, dhi + 1))
        boxes = _build_layout(sid, class_ids, name_texts, n_distractors,
                              rng_layout, config)
        pills = []
        for k, cid in enumerate(class_ids):
            noise = rng_noise.normal(0.0, config.noise_sigma, size=config.feature_dim)
            pills.append(Pill(k, protos[cid] + noise, cid, prescribed=True))
        samples.append(PrescriptionSample(sid, boxes, pills))

    dataset = Dataset(DatasetMeta(config, seed, classes, _distractor_token_pool()), samples)
    for s in dataset.samples:
        validate_sample(s, config)
    return dataset


def _distractor_token_pool() -> list[str]:
    pool = set(_HEADER_WORDS) | set(_DIAGNOSIS_WORDS) | set(_INSTRUCTION_WORDS)
    pool |= set(_QUANTITY_UNITS) | {"signature"}
    pool |= {f"x{i}" for i in range(1, 31)}
    return sorted(pool)


def vocabulary_tokens(meta: DatasetMeta) -> list[str]:
    """Every token the generator can emit: class name forms plus distractors."""
    tokens = set(meta.distractor_tokens)
    for cls in meta.classes:
        for form in cls.name_forms():
            tokens |= set(form)
    return sorted(tokens)


def validate_sample(sample: PrescriptionSample, config: GeneratorConfig | None = None) -> None:
    """Raise on any structural invariant violation."""
    for b in sample.boxes:
        x0, y0, x1, y1 = b.bbox
        if not (x0 < x1 and y0 < y1):
            raise DataFormatError(f"sample {sample.sample_id} box {b.box_id}: bad bbox {b.bbox}")
        if b.is_pill_name != (b.pill_class is not None):
            raise DataFormatError(
                f"sample {sample.sample_id} box {b.box_id}: label/class inconsistency")
    named = sample.class_set()
    for p in sample.pills:
        if p.prescribed and p.class_id not in named:
            raise DataFormatError(
                f"sample {sample.sample_id} pill {p.pill_id}: prescribed class "
                f"{p.class_id} named by no box")
        if config is not None and p.features.shape != (config.feature_dim,):
            raise DataFormatError(
                f"sample {sample.sample_id} pill {p.pill_id}: feature width "
                f"{p.features.shape} != {config.feature_dim}")


# ---------------------------------------------------------------------------
# scenario splits
# ---------------------------------------------------------------------------

def _split_stratified(dataset: Dataset, seed: int,
                      train_fraction: float = 0.7) -> tuple[list[int], list[int]]:
    """Iterative stratification over per-prescription class sets.

    Repeatedly takes the class with the fewest unassigned prescriptions and
    deals its prescriptions to the subset with the largest remaining demand
    for that class (ties: larger total demand, then a seeded coin).
    """
    rng = np.random.default_rng([seed, 11])
    ids = [s.sample_id for s in dataset.samples]
    labels = {s.sample_id: s.class_set() for s in dataset.samples}
    fractions = (train_fraction, 1.0 - train_fraction)

    desired_total = [f * len(ids) for f in fractions]
    counts: dict[int, int] = {}
    for sid in ids:
        for c in labels[sid]:
            counts[c] = counts.get(c, 0) + 1
    desired_label = {c: [f * counts[c] for f in fractions] for c in counts}

    remaining = set(ids)
    assignment: dict[int, int] = {}
    while remaining:
        per_class: dict[int, int] = {}
        for sid in remaining:
            for c in labels[sid]:
                per_class[c] = per_class.get(c, 0) + 1
        if not per_class:
            for sid in sorted(remaining):
                j = int(np.argmax(desired_total))
                assignment[sid] = j
                desired_total[j] -= 1
            break
        rarest = min(per_class, key=lambda c: (per_class[c], c))
        for sid in sorted(s for s in remaining if rarest in labels[s]):
            demand = desired_label[rarest]
            if demand[0] > demand[1]:
                j = 0
            elif demand[1] > demand[0]:
                j = 1
            elif desired_total[0] > desired_total[1]:
                j = 0
            elif desired_total[1] > desired_total[0]:
                j = 1
            else:
                j = int(rng.integers(0, 2))
            assignment[sid] = j
            remaining.discard(sid)
            for c in labels[sid]:
                desired_label[c][j] -= 1
            desired_total[j] -= 1

    train = [sid for sid in ids if assignment[sid] == 0]
    test = [sid for sid in ids if assignment[sid] == 1]
    return train, test


def _split_disjoint(dataset: Dataset, seed: int) -> tuple[list[int], list[int]]:
    """Greedy maximal train set of prescriptions with pairwise-disjoint classes."""
    rng = np.random.default_rng([seed, 12])
    order = [dataset.samples[i].sample_id
             for i in rng.permutation(len(dataset.samples))]
    labels = {s.sample_id: s.class_set() for s in dataset.samples}
    covered: set[int] = set()
    train = []
    for sid in order:
        if not (labels[sid] & covered):
            train.append(sid)
            covered |= labels[sid]
    test = [s.sample_id for s in dataset.samples if s.sample_id not in set(train)]
    if not test:
        raise ValueError(
            "scenario 1-2: disjoint train set consumed every prescription; nothing left to test")
    return sorted(train), test


def _split_once_per_class(dataset: Dataset, seed: int) -> tuple[list[int], list[int]]:
    """Greedy packing so every class present in train appears exactly once.

    Classes are visited in seeded order; a prescription joins the train set
    only while all of its classes are still uncovered, so no class is ever
    duplicated. Classes left uncovered (exact cover rarely exists) are logged.
    """
    rng = np.random.default_rng([seed, 13])
    labels = {s.sample_id: s.class_set() for s in dataset.samples}
    all_classes = sorted({c for lab in labels.values() for c in lab})
    order = [all_classes[i] for i in rng.permutation(len(all_classes))]

    covered: set[int] = set()
    train: list[int] = []
    for cls in order:
        if cls in covered:
            continue
        candidates = [sid for sid, lab in sorted(labels.items())
                      if cls in lab and not (lab & covered)]
        if not candidates:
            continue
        pick = min(candidates, key=lambda sid: (len(labels[sid]), sid))
        train.append(pick)
        covered |= labels[pick]
    if not train:
        raise ValueError("scenario 1-3: could not cover any class")
    uncovered = [c for c in all_classes if c not in covered]
    if uncovered:
        logger.info("scenario 1-3: %d of %d classes have no training prescription",
                    len(uncovered), len(all_classes))
    train_set = set(train)
    test = [s.sample_id for s in dataset.samples if s.sample_id not in train_set]
    if not test:
        raise ValueError("scenario 1-3: nothing left to test")
    return sorted(train), test


def split_scenario(dataset: Dataset, scenario: str, seed: int) -> ScenarioSplit:
    """Partition prescriptions per the scenario protocol.

    1-1: iterative stratified ~70/30; 1-2: train prescriptions pairwise
    class-disjoint; 1-3: each class covered by at most one train prescription;
    2-1/2-2 reuse the 1-1 partition and mark the test set for mismatch
    injection (near / far lookalike replacements).
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    if scenario == "1-2":
        train, test = _split_disjoint(dataset, seed)
        return ScenarioSplit(scenario, seed, train, test)
    if scenario == "1-3":
        train, test = _split_once_per_class(dataset, seed)
        return ScenarioSplit(scenario, seed, train, test)
    train, test = _split_stratified(dataset, seed)
    if scenario == "1-1":
        return ScenarioSplit(scenario, seed, train, test)
    mode = "near" if scenario == "2-1" else "far"
    return ScenarioSplit(scenario, seed, train, test, mismatch_fraction=0.5,
                         mismatch_mode=mode)


def realize_split(dataset: Dataset, split: ScenarioSplit
                  ) -> tuple[list[PrescriptionSample], list[PrescriptionSample]]:
    """Materialize train/test sample lists, applying mismatch injection for 2-x."""
    train = dataset.by_id(split.train_ids)
    test = dataset.by_id(split.test_ids)
    if split.mismatch_fraction > 0.0:
        test = inject_mismatches(test, dataset.meta.classes, split.mismatch_fraction,
                                 split.mismatch_mode, split.seed,
                                 dataset.meta.config.noise_sigma)
    return train, test


def _median_prototype_distance(protos: np.ndarray) -> float:
    n = protos.shape[0]
    dists = [float(np.linalg.norm(protos[i] - protos[j]))
             for i in range(n) for j in range(i + 1, n)]
    return float(np.median(dists))


def inject_mismatches(samples: list[PrescriptionSample], classes: list[PillClass],
                      fraction: float, mode: str, seed: int,
                      noise_sigma: float) -> list[PrescriptionSample]:
    """Replace floor(fraction*M + 0.5) pills per prescription with foreign pills.

    near: the replacement class has the closest prototype to the replaced
    pill's among classes the prescription does not name. far: drawn uniformly
    from foreign classes whose prototype distance exceeds the dataset median.
    Replaced pills get fresh noisy features and prescribed=False.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"inject_mismatches: fraction must be in (0, 1), got {fraction}")
    if mode not in ("near", "far"):
        raise ValueError(f"inject_mismatches: unknown mode {mode!r}")
    rng = np.random.default_rng([seed, 21])
    protos = np.stack([c.prototype for c in classes])
    median = _median_prototype_distance(protos)

    out = []
    for sample in samples:
        sample = copy.deepcopy(sample)
        named = sample.class_set()
        foreign = [c.class_id for c in classes if c.class_id not in named]
        if not foreign:
            raise ValueError(
                f"inject_mismatches: sample {sample.sample_id} names every class; "
                f"no foreign class available")
        m = len(sample.pills)
        k = int(math.floor(fraction * m + 0.5))
        chosen = sorted(int(i) for i in rng.choice(m, size=k, replace=False))
        for idx in chosen:
            pill = sample.pills[idx]
            dists = np.linalg.norm(protos[foreign] - protos[pill.class_id], axis=1)
            if mode == "near":
                new_cls = foreign[int(np.argmin(dists))]
            else:
                pool = [c for c, d in zip(foreign, dists) if d > median]
                if not pool:
                    raise ValueError(
                        f"inject_mismatches: sample {sample.sample_id} has no foreign "
                        f"class beyond the median prototype distance")
                new_cls = pool[int(rng.integers(0, len(pool)))]
            noise = rng.normal(0.0, noise_sigma, size=protos.shape[1])
            sample.pills[idx] = Pill(pill.pill_id, protos[new_cls] + noise,
                                     new_cls, prescribed=False)
        out.append(sample)
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_FORMAT_VERSION = 1


def _sample_to_json(sample: PrescriptionSample) -> dict:
    return {
        "id": sample.sample_id,
        "boxes": [{
            "id": b.box_id,
            "bbox": [float(v) for v in b.bbox],
            "text": b.text,
            "y": bool(b.is_pill_name),
            "class": b.pill_class,
        } for b in sample.boxes],
        "pills": [{
            "id": p.pill_id,
            "features": [float(v) for v in p.features],
            "class": p.class_id,
            "prescribed": bool(p.prescribed),
        } for p in sample.pills],
    }


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise DataFormatError(f"{where}: missing field {key!r}")
    return record[key]


def _sample_from_json(record: dict, where: str) -> PrescriptionSample:
    if not isinstance(record, dict):
        raise DataFormatError(f"{where}: expected an object")
    sid = _require(record, "id", where)
    boxes = []
    for b in _require(record, "boxes", where):
        hint = f"{where} box"
        bbox = _require(b, "bbox", hint)
        if not (isinstance(bbox, list) and len(bbox) == 4):
            raise DataFormatError(f"{hint}: field 'bbox' must hold 4 numbers")
        boxes.append(BoxRecord(
            box_id=int(_require(b, "id", hint)),
            bbox=tuple(float(v) for v in bbox),
            text=str(_require(b, "text", hint)),
            is_pill_name=bool(_require(b, "y", hint)),
            pill_class=b.get("class"),
        ))
    pills = []
    for p in _require(record, "pills", where):
        hint = f"{where} pill"
        pills.append(Pill(
            pill_id=int(_require(p, "id", hint)),
            features=np.asarray(_require(p, "features", hint), dtype=np.float64),
            class_id=int(_require(p, "class", hint)),
            prescribed=bool(_require(p, "prescribed", hint)),
        ))
    return PrescriptionSample(int(sid), boxes, pills)


def save_samples(samples: list[PrescriptionSample], path) -> None:
    """One JSON object per line; float repr round-trips losslessly."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(_sample_to_json(s), allow_nan=False) + "\n")


def load_samples(path) -> list[PrescriptionSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{where}: malformed JSON ({exc.msg})") from exc
            sample = _sample_from_json(record, where)
            try:
                validate_sample(sample)
            except DataFormatError as exc:
                raise DataFormatError(f"{where}: {exc}") from exc
            samples.append(sample)
    if not samples:
        raise DataFormatError(f"{path}: empty dataset")
    return samples


def _meta_to_json(meta: DatasetMeta) -> dict:
    cfg = asdict(meta.config)
    cfg["pills_per_prescription"] = list(cfg["pills_per_prescription"])
    cfg["distractors_per_prescription"] = list(cfg["distractors_per_prescription"])
    return {
        "format_version": _FORMAT_VERSION,
        "seed": meta.seed,
        "config": cfg,
        "classes": [{
            "id": c.class_id,
            "name": list(c.name_tokens),
            "synonyms": [list(s) for s in c.synonyms],
            "prototype": [float(v) for v in c.prototype],
        } for c in meta.classes],
        "distractor_tokens": list(meta.distractor_tokens),
    }


def _meta_from_json(record: dict, where: str) -> DatasetMeta:
    if record.get("format_version") != _FORMAT_VERSION:
        raise DataFormatError(f"{where}: unsupported format_version "
                              f"{record.get('format_version')!r}")
    cfg = dict(_require(record, "config", where))
    cfg["pills_per_prescription"] = tuple(cfg["pills_per_prescription"])
    cfg["distractors_per_prescription"] = tuple(cfg["distractors_per_prescription"])
    config = GeneratorConfig(**cfg)
    classes = []
    for c in _require(record, "classes", where):
        classes.append(PillClass(
            class_id=int(_require(c, "id", f"{where} class")),
            name_tokens=tuple(_require(c, "name", f"{where} class")),
            prototype=np.asarray(_require(c, "prototype", f"{where} class"), dtype=np.float64),
            synonyms=tuple(tuple(s) for s in c.get("synonyms", [])),
        ))
    return DatasetMeta(config, int(_require(record, "seed", where)), classes,
                       list(_require(record, "distractor_tokens", where)))


def save_dataset(dataset: Dataset, dirpath) -> None:
    """Write {meta.json, samples.jsonl} into the directory (created if missing)."""
    os.makedirs(dirpath, exist_ok=True)
    with open(os.path.join(dirpath, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(_meta_to_json(dataset.meta), fh, indent=2, allow_nan=False)
        fh.write("\n")
    save_samples(dataset.samples, os.path.join(dirpath, "samples.jsonl"))


def load_meta(dirpath) -> DatasetMeta:
    path = os.path.join(dirpath, "meta.json")
    with open(path, encoding="utf-8") as fh:
        try:
            record = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: malformed JSON ({exc.msg})") from exc
    return _meta_from_json(record, path)


def load_dataset(dirpath) -> Dataset:
    meta = load_meta(dirpath)
    samples = load_samples(os.path.join(dirpath, "samples.jsonl"))
    return Dataset(meta, samples)
