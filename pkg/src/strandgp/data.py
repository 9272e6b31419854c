"""Input parsing and model geometry.

Two kinds of input drive everything downstream:

* paired expression tables (case and control, wide CSV, one row per
  patient) from which the differential matrix ``z = case - control`` is
  computed, and
* a genome annotation mapping each measured unit (miRNA) to one or more
  (strand, coordinate) loci, from which the 0/1 incidence matrix ``P`` is
  built.  A unit annotated at q loci has q ones in its row, so its latent
  effect is the sum of the per-locus effects.

All containers are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

_STRAND_SYMBOLS = {"+": "+", "-": "-", "−": "-", "–": "-"}


def _normalize_strand(symbol: str) -> str:
    symbol = symbol.strip()
    if symbol not in _STRAND_SYMBOLS:
        raise DataError(f"unknown strand symbol {symbol!r} (expected '+' or '-')")
    return _STRAND_SYMBOLS[symbol]


@dataclass(frozen=True)
class ExpressionDataset:
    """Aligned case/control expression matrices and their difference.

    Attributes:
        patient_ids: n patient identifiers, row order of all matrices.
        mirna_names: m unique names, column order of all matrices.
        case: n x m matrix (disease tissue).
        control: n x m matrix (normal tissue).
        z: n x m differential matrix, exactly ``case - control``.
    """

    patient_ids: tuple[str, ...]
    mirna_names: tuple[str, ...]
    case: np.ndarray
    control: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        case = np.asarray(self.case, dtype=float)
        control = np.asarray(self.control, dtype=float)
        n, m = case.shape
        if control.shape != (n, m):
            raise DataError(f"case {case.shape} and control {control.shape} dimensions differ")
        if len(self.patient_ids) != n or len(self.mirna_names) != m:
            raise DataError("label lengths do not match matrix dimensions")
        if len(set(self.mirna_names)) != m:
            raise DataError("duplicate miRNA names")
        if len(set(self.patient_ids)) != n:
            raise DataError("duplicate patient ids")
        if not (np.isfinite(case).all() and np.isfinite(control).all()):
            raise DataError("non-finite entries in expression matrices")
        object.__setattr__(self, "case", case)
        object.__setattr__(self, "control", control)
        object.__setattr__(self, "z", case - control)
        for name in ("case", "control", "z"):
            getattr(self, name).setflags(write=False)

    @property
    def n_patients(self) -> int:
        return self.case.shape[0]

    @property
    def n_mirnas(self) -> int:
        return self.case.shape[1]

    def drop_patient(self, index: int) -> "ExpressionDataset":
        """Dataset with one patient row removed (used by leave-one-out)."""
        keep = [j for j in range(self.n_patients) if j != index]
        if len(keep) == self.n_patients:
            raise DataError(f"patient index {index} out of range")
        return ExpressionDataset(
            patient_ids=tuple(self.patient_ids[j] for j in keep),
            mirna_names=self.mirna_names,
            case=self.case[keep],
            control=self.control[keep],
            z=None,  # recomputed in __post_init__
        )


@dataclass(frozen=True)
class StrandRecord:
    """One chromosome strand: its length and the ordered loci on it."""

    strand_id: str
    length: float
    loci: tuple[tuple[str, float], ...]  # (mirna_name, coordinate), ascending

    @property
    def coordinates(self) -> np.ndarray:
        return np.array([c for _, c in self.loci], dtype=float)

    @property
    def mirnas(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.loci)


@dataclass(frozen=True)
class GenomeAnnotation:
    """Strand partition of all annotated loci."""

    strands: tuple[StrandRecord, ...]

    @property
    def n_strands(self) -> int:
        return len(self.strands)

    @property
    def total_loci(self) -> int:
        return sum(len(s.loci) for s in self.strands)

    @property
    def annotated_names(self) -> set[str]:
        return {name for s in self.strands for name, _ in s.loci}

    def restrict(self, names) -> "GenomeAnnotation":
        """Drop loci of units not in ``names``; drop strands left empty."""
        wanted = set(names)
        kept = []
        for s in self.strands:
            loci = tuple(loc for loc in s.loci if loc[0] in wanted)
            if loci:
                kept.append(StrandRecord(s.strand_id, s.length, loci))
        return GenomeAnnotation(strands=tuple(kept))


@dataclass(frozen=True)
class DesignMatrix:
    """Incidence matrix mapping units to loci, plus the strand geometry.

    ``p`` is m x L with exactly one 1 per column (each locus expresses one
    unit) and at least one 1 per row.  Columns are ordered strand by strand
    (strand ids sorted lexicographically), coordinates ascending within a
    strand; ``strand_slices[l]`` is the column range of strand l.
    """

    p: np.ndarray
    mirna_names: tuple[str, ...]
    annotation: GenomeAnnotation  # restricted to the named units, in column order
    column_index: dict = field(repr=False)

    def __post_init__(self):
        self.p.setflags(write=False)

    @property
    def n_mirnas(self) -> int:
        return self.p.shape[0]

    @property
    def n_loci(self) -> int:
        return self.p.shape[1]

    @property
    def n_strands(self) -> int:
        return self.annotation.n_strands

    @property
    def strand_slices(self) -> tuple[slice, ...]:
        out, start = [], 0
        for s in self.annotation.strands:
            out.append(slice(start, start + len(s.loci)))
            start += len(s.loci)
        return tuple(out)

    def row_multiplicity(self) -> np.ndarray:
        """Number of annotated loci per unit (row sums of ``p``)."""
        return self.p.sum(axis=1)


def _read_rows(path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows


def _parse_wide_expression(path) -> tuple[list[str], list[str], np.ndarray, np.ndarray]:
    """Returns (patient_ids, mirna_names, values, missing_mask) for one file."""
    rows = _read_rows(path)
    header = [c.strip() for c in rows[0]]
    if len(header) < 2:
        raise DataError(f"{path}: header must be 'patient,<name>,...'")
    names = header[1:]
    seen = set()
    for name in names:
        if name in seen:
            raise DataError(f"{path}: duplicate miRNA column {name!r}")
        seen.add(name)
    patients, values, missing = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        patients.append(row[0].strip())
        vals, miss = [], []
        for name, cell in zip(names, row[1:]):
            cell = cell.strip()
            if cell == "":
                vals.append(np.nan)
                miss.append(True)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric cell {cell!r} in column {name!r}") from None
            vals.append(v)
            miss.append(not np.isfinite(v))
        values.append(vals)
        missing.append(miss)
    if len(set(patients)) != len(patients):
        raise DataError(f"{path}: duplicate patient ids")
    return patients, names, np.array(values, dtype=float), np.array(missing, dtype=bool)


def load_expression(case_path, control_path, drop_incomplete_patients: bool = False) -> ExpressionDataset:
    """Load paired wide-CSV expression files and compute the differential matrix.

    Both files must cover the same patients and the same miRNAs; row and
    column order may differ and is realigned by name.  Missing or
    non-finite cells are a hard error unless ``drop_incomplete_patients``
    is set, in which case the offending patient rows are removed from both
    matrices.

    Args:
        case_path: wide CSV, header ``patient,<mirna>,...`` (disease tissue).
        control_path: same layout for normal tissue.
        drop_incomplete_patients: remove rows with missing cells instead of
            failing.

    Raises:
        DataError: dimension mismatch, unparseable or missing cells,
            duplicate names, or differing patient/miRNA sets.
    """
    case_pat, case_names, case_vals, case_miss = _parse_wide_expression(case_path)
    ctrl_pat, ctrl_names, ctrl_vals, ctrl_miss = _parse_wide_expression(control_path)

    if set(case_names) != set(ctrl_names):
        only_case = sorted(set(case_names) - set(ctrl_names))[:5]
        only_ctrl = sorted(set(ctrl_names) - set(case_names))[:5]
        raise DataError(f"miRNA sets differ (case-only {only_case}, control-only {only_ctrl})")
    if set(case_pat) != set(ctrl_pat):
        raise DataError("patient sets differ between case and control files")

    # Align control onto the case file's ordering.
    col_of = {name: j for j, name in enumerate(ctrl_names)}
    row_of = {pid: i for i, pid in enumerate(ctrl_pat)}
    col_perm = [col_of[name] for name in case_names]
    row_perm = [row_of[pid] for pid in case_pat]
    ctrl_vals = ctrl_vals[np.ix_(row_perm, col_perm)]
    ctrl_miss = ctrl_miss[np.ix_(row_perm, col_perm)]

    bad_rows = (case_miss.any(axis=1) | ctrl_miss.any(axis=1))
    if bad_rows.any():
        offenders = [pid for pid, bad in zip(case_pat, bad_rows) if bad]
        if not drop_incomplete_patients:
            raise DataError(f"missing/non-finite cells for patients {offenders}")
        keep = ~bad_rows
        case_pat = [pid for pid, k in zip(case_pat, keep) if k]
        case_vals = case_vals[keep]
        ctrl_vals = ctrl_vals[keep]
        if case_vals.shape[0] == 0:
            raise DataError("all patients dropped as incomplete")

    return ExpressionDataset(
        patient_ids=tuple(case_pat),
        mirna_names=tuple(case_names),
        case=case_vals,
        control=ctrl_vals,
        z=None,
    )


def write_expression(dataset: ExpressionDataset, case_path, control_path) -> None:
    """Write the dataset back to two wide CSVs (bit-exact round trip)."""
    for path, matrix in ((case_path, dataset.case), (control_path, dataset.control)):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patient", *dataset.mirna_names])
            for pid, row in zip(dataset.patient_ids, matrix):
                writer.writerow([pid, *(repr(float(v)) for v in row)])


def load_annotation(path, lengths_path=None) -> GenomeAnnotation:
    """Load a locus annotation CSV into per-strand records.

    The annotation CSV has columns ``mirna,chromosome,strand,coordinate``.
    Loci are grouped per (chromosome, strand); within a strand they are
    sorted by coordinate.  Strand length comes from the optional lengths
    CSV (``chromosome,length``, applied to both strands of a chromosome)
    and otherwise defaults to the largest coordinate observed on the
    strand.

    Raises:
        DataError: unknown strand symbol, non-positive coordinate or
            length, duplicate (strand, coordinate) pair, malformed header.
    """
    rows = _read_rows(path)
    header = [c.strip().lower() for c in rows[0]]
    required = ["mirna", "chromosome", "strand", "coordinate"]
    if header[: len(required)] != required:
        raise DataError(f"{path}: header must start with {','.join(required)}")

    lengths = {}
    if lengths_path is not None:
        lrows = _read_rows(lengths_path)
        lheader = [c.strip().lower() for c in lrows[0]]
        if lheader[:2] != ["chromosome", "length"]:
            raise DataError(f"{lengths_path}: header must be chromosome,length")
        for lineno, row in enumerate(lrows[1:], start=2):
            chrom = row[0].strip()
            try:
                length = float(row[1])
            except (ValueError, IndexError):
                raise DataError(f"{lengths_path}:{lineno}: bad length") from None
            if length <= 0:
                raise DataError(f"{lengths_path}:{lineno}: non-positive length")
            lengths[chrom] = length

    per_strand: dict[str, list[tuple[str, float]]] = {}
    strand_chrom: dict[str, str] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) < 4:
            raise DataError(f"{path}:{lineno}: expected 4 columns")
        name, chrom, strand, coord_raw = (c.strip() for c in row[:4])
        strand_id = chrom + _normalize_strand(strand)
        try:
            coord = float(coord_raw)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric coordinate {coord_raw!r}") from None
        if coord <= 0:
            raise DataError(f"{path}:{lineno}: non-positive coordinate for {name!r}")
        per_strand.setdefault(strand_id, []).append((name, coord))
        strand_chrom[strand_id] = chrom

    records = []
    for strand_id in sorted(per_strand):
        loci = sorted(per_strand[strand_id], key=lambda t: t[1])
        coords = [c for _, c in loci]
        for a, b in zip(coords, coords[1:]):
            if a == b:
                raise DataError(f"duplicate locus at coordinate {a} on strand {strand_id}")
        length = lengths.get(strand_chrom[strand_id], max(coords))
        if length <= 0:
            raise DataError(f"non-positive length for strand {strand_id}")
        records.append(StrandRecord(strand_id=strand_id, length=length, loci=tuple(loci)))
    return GenomeAnnotation(strands=tuple(records))


def build_design_matrix(annotation: GenomeAnnotation, mirna_names) -> DesignMatrix:
    """Build the unit-to-locus incidence matrix for the named units.

    Every name must be annotated at least once; loci of units outside
    ``mirna_names`` are dropped (they carry no measured signal).  Column
    order is strand by strand, coordinate ascending, matching
    ``DesignMatrix.strand_slices``.

    Raises:
        DataError: any unit without an annotation (all offenders listed).
    """
    names = tuple(mirna_names)
    restricted = annotation.restrict(names)
    annotated = restricted.annotated_names
    missing = [name for name in names if name not in annotated]
    if missing:
        raise DataError(f"unannotated miRNAs: {missing}")

    row_of = {name: i for i, name in enumerate(names)}
    n_loci = restricted.total_loci
    p = np.zeros((len(names), n_loci), dtype=np.int8)
    column_index = {}
    col = 0
    for strand in restricted.strands:
        for name, coord in strand.loci:
            p[row_of[name], col] = 1
            column_index[(strand.strand_id, coord)] = col
            col += 1
    return DesignMatrix(p=p, mirna_names=names, annotation=restricted, column_index=column_index)
