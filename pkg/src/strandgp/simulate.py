"""Synthetic data generated from the model, for integration and acceptance runs.

Builds a random strand layout, draws unit effects either from the
Gaussian-process prior or as planted signals, draws the error covariance
from its inverse-Wishart prior, and emits case/control tables whose
difference reproduces the simulated differentials exactly.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import GenomeAnnotation, StrandRecord, build_design_matrix
from .kernels import StrandHyperParams, prior_cov_psi, sample_psi_prior


@dataclass(frozen=True)
class SimulatedData:
    mirna_names: tuple
    patient_ids: tuple
    case: np.ndarray
    control: np.ndarray
    z: np.ndarray
    annotation: GenomeAnnotation
    psi_true: np.ndarray
    hypers: tuple

    @property
    def truly_deregulated(self) -> np.ndarray:
        return np.abs(self.psi_true) > 1.0


def simulate_dataset(m: int, n: int, k: int, seed: int = 0,
                     psi_mode: str = "gp",
                     planted: int = 0, signal: float = 2.5,
                     varrho2: float = 4.0, nu: float = 1.5,
                     rho_fraction: float = 0.3,
                     delta2: float = 1.0,
                     multi_locus_fraction: float = 0.1,
                     strand_length: float = 1e4) -> SimulatedData:
    """Generate one dataset from the model.

    Args:
        m, n, k: unit, patient, and strand counts.
        psi_mode: "gp" draws effects from the strand-blocked prior at the
            fixed hyperparameters below; "planted" zeroes the effects except
            for ``planted`` entries set to +-``signal`` (alternating sign).
        varrho2, nu, rho_fraction: shared hyperparameters; the correlation
            length is ``rho_fraction * strand_length``.
        delta2: inverse-Wishart scale parameter of the error covariance.
        multi_locus_fraction: fraction of units receiving a second locus on
            another strand.
    """
    if k < 1 or m < k:
        raise ValueError("need at least one strand and m >= k")
    rng = np.random.default_rng(seed)
    names = tuple(f"mir-{i:04d}" for i in range(m))
    patients = tuple(f"patient-{j:02d}" for j in range(n))

    # Units round-robin over strands; coordinates distinct within a strand.
    per_strand: dict[str, list] = {}
    strand_ids = [f"Chr{i + 1}{'+' if i % 2 == 0 else '-'}" for i in range(k)]
    for i, name in enumerate(names):
        sid = strand_ids[i % k]
        per_strand.setdefault(sid, []).append(name)
    extra = rng.choice(m, size=int(multi_locus_fraction * m), replace=False) if k > 1 else []
    for i in extra:
        home = strand_ids[i % k]
        away = strand_ids[(i + 1) % k]
        if away != home:
            per_strand.setdefault(away, []).append(names[i])

    strands = []
    for sid in sorted(per_strand):
        members = per_strand[sid]
        coords = np.sort(rng.choice(np.arange(1, int(strand_length)), size=len(members), replace=False)).astype(float)
        loci = tuple((name, float(c)) for name, c in zip(members, coords))
        strands.append(StrandRecord(strand_id=sid, length=float(strand_length), loci=loci))
    annotation = GenomeAnnotation(strands=tuple(strands))
    design = build_design_matrix(annotation, names)

    hypers = tuple(StrandHyperParams(varrho2, nu, rho_fraction * strand_length)
                   for _ in range(design.n_strands))
    if psi_mode == "gp":
        pc = prior_cov_psi(design, hypers)
        psi = sample_psi_prior(pc, 1, rng)[0]
    elif psi_mode == "planted":
        psi = np.zeros(m)
        chosen = rng.choice(m, size=min(planted, m), replace=False)
        signs = np.where(np.arange(chosen.size) % 2 == 0, -1.0, 1.0)
        psi[chosen] = signs * signal
    else:
        raise ValueError(f"unknown psi_mode {psi_mode!r}")

    ups = m + 3
    sigma = np.atleast_2d(stats.invwishart.rvs(df=ups, scale=delta2 * np.eye(m), random_state=rng))
    chol = np.linalg.cholesky(sigma)
    tau = rng.standard_normal((n, m)) @ chol.T
    z = psi[None, :] + tau
    control = rng.standard_normal((n, m))
    case = control + z
    return SimulatedData(mirna_names=names, patient_ids=patients, case=case,
                         control=control, z=z, annotation=annotation,
                         psi_true=psi, hypers=hypers)


def write_simulated(sim: SimulatedData, outdir) -> dict:
    """Write case/control/annotation/truth CSVs; returns the path map."""
    os.makedirs(outdir, exist_ok=True)
    paths = {
        "case": os.path.join(outdir, "case.csv"),
        "control": os.path.join(outdir, "control.csv"),
        "annotation": os.path.join(outdir, "annotation.csv"),
        "truth": os.path.join(outdir, "truth.csv"),
    }
    for key, matrix in (("case", sim.case), ("control", sim.control)):
        with open(paths[key], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patient", *sim.mirna_names])
            for pid, row in zip(sim.patient_ids, matrix):
                writer.writerow([pid, *(repr(float(v)) for v in row)])
    with open(paths["annotation"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mirna", "chromosome", "strand", "coordinate"])
        for strand in sim.annotation.strands:
            chrom, sign = strand.strand_id[:-1], strand.strand_id[-1]
            for name, coord in strand.loci:
                writer.writerow([name, chrom, sign, repr(coord)])
    with open(paths["truth"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mirna", "psi_true", "deregulated"])
        for name, value, flag in zip(sim.mirna_names, sim.psi_true, sim.truly_deregulated):
            writer.writerow([name, repr(float(value)), int(flag)])
    return paths
