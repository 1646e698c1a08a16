"""Synthetic covariate-shifted source/target datasets and a CSV loader.

Both generators build a labelled source domain and a shifted target domain
from one seed, then split the target 50/50 into an unlabeled training half
and a labelled held-out test half.  The dataset type carries no labels for
the target training split at all, so they cannot leak into training.

CSV schema: header ``f0,...,f{p-1},label`` with the label cell left blank for
unlabeled rows; UTF-8, LF newlines, decimal float64 values.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    """Malformed dataset input (file contents or generator arguments)."""


@dataclass(frozen=True)
class DomainDataset:
    source_x: np.ndarray
    source_y: np.ndarray
    target_train_x: np.ndarray
    target_test_x: np.ndarray
    target_test_y: np.ndarray
    input_dim: int
    n_classes: int
    provenance: dict

    def __post_init__(self):
        for name in ("source_x", "target_train_x", "target_test_x"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != self.input_dim:
                raise DatasetError(f"{name} must be (n, {self.input_dim})")
            if not np.isfinite(arr).all():
                raise DatasetError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        for name in ("source_y", "target_test_y"):
            labels = np.asarray(getattr(self, name), dtype=np.intp)
            if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
                raise DatasetError(f"{name} labels must lie in [0, {self.n_classes})")
            object.__setattr__(self, name, labels)
        if self.source_y.shape[0] != self.source_x.shape[0]:
            raise DatasetError("source labels must match source samples")
        if self.target_test_y.shape[0] != self.target_test_x.shape[0]:
            raise DatasetError("target test labels must match target test samples")


def _split_target(
    x: np.ndarray, y: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random 50/50 split; the training half keeps samples only, never labels."""
    order = rng.permutation(x.shape[0])
    n_train = (x.shape[0] + 1) // 2
    train_idx, test_idx = order[:n_train], order[n_train:]
    return x[train_idx], x[test_idx], y[test_idx]


def _moons(n: int, noise_sd: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n0 = n - n // 2
    n1 = n // 2
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([upper, lower])
    x += rng.normal(0.0, noise_sd, size=x.shape)
    y = np.concatenate([np.zeros(n0, dtype=np.intp), np.ones(n1, dtype=np.intp)])
    order = rng.permutation(n)
    return x[order], y[order]


def two_moons_shift(
    n_per_domain: int = 500,
    rotation_deg: float = 30.0,
    noise_sd: float = 0.1,
    seed: int = 0,
) -> DomainDataset:
    """Interleaved half-circles; the target domain is rotated about the origin."""
    if n_per_domain < 2:
        raise DatasetError("n_per_domain must be at least 2")
    if noise_sd < 0:
        raise DatasetError("noise_sd must be nonnegative")
    rng = np.random.default_rng(seed)
    source_x, source_y = _moons(n_per_domain, noise_sd, rng)
    target_x, target_y = _moons(n_per_domain, noise_sd, rng)
    theta = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    target_x = target_x @ rot.T
    train_x, test_x, test_y = _split_target(target_x, target_y, rng)
    return DomainDataset(
        source_x=source_x,
        source_y=source_y,
        target_train_x=train_x,
        target_test_x=test_x,
        target_test_y=test_y,
        input_dim=2,
        n_classes=2,
        provenance={
            "generator": "two_moons_shift",
            "n_per_domain": n_per_domain,
            "rotation_deg": rotation_deg,
            "noise_sd": noise_sd,
            "seed": seed,
        },
    )


def gaussian_blobs_shift(
    n_classes: int = 3,
    n_per_class: int = 100,
    mean_shift: tuple[float, ...] = (0.0, 0.0),
    scale: float = 1.0,
    seed: int = 0,
    cluster_sd: float = 1.0,
    radius: float = 4.0,
) -> DomainDataset:
    """Isotropic clusters on a circle; target clusters are translated and rescaled.

    Target samples are drawn as ``center + mean_shift + scale * noise``, so
    ``scale`` widens (or narrows) each cluster around its shifted center.
    """
    if n_classes < 2:
        raise DatasetError("n_classes must be at least 2")
    if n_per_class < 1 or scale <= 0 or cluster_sd < 0:
        raise DatasetError("invalid blob parameters")
    shift = np.asarray(mean_shift, dtype=np.float64)
    if shift.shape != (2,):
        raise DatasetError("mean_shift must be a 2-vector")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = radius * np.column_stack([np.cos(angles), np.sin(angles)])

    def draw(shifted: bool) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for k in range(n_classes):
            noise = rng.normal(0.0, cluster_sd, size=(n_per_class, 2))
            if shifted:
                xs.append(centers[k] + shift + scale * noise)
            else:
                xs.append(centers[k] + noise)
            ys.append(np.full(n_per_class, k, dtype=np.intp))
        x = np.vstack(xs)
        y = np.concatenate(ys)
        order = rng.permutation(x.shape[0])
        return x[order], y[order]

    source_x, source_y = draw(shifted=False)
    target_x, target_y = draw(shifted=True)
    train_x, test_x, test_y = _split_target(target_x, target_y, rng)
    return DomainDataset(
        source_x=source_x,
        source_y=source_y,
        target_train_x=train_x,
        target_test_x=test_x,
        target_test_y=test_y,
        input_dim=2,
        n_classes=n_classes,
        provenance={
            "generator": "gaussian_blobs_shift",
            "n_classes": n_classes,
            "n_per_class": n_per_class,
            "mean_shift": list(map(float, shift)),
            "scale": scale,
            "seed": seed,
            "cluster_sd": cluster_sd,
            "radius": radius,
        },
    )


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------


def _write_rows(path, x: np.ndarray, y: np.ndarray | None) -> None:
    p = x.shape[1]
    lines = [",".join([f"f{i}" for i in range(p)] + ["label"])]
    for i in range(x.shape[0]):
        cells = [repr(float(v)) for v in x[i]]
        cells.append("" if y is None else str(int(y[i])))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def save_csv_dataset(ds: DomainDataset, directory) -> dict[str, str]:
    """Write source/target_train/target_test CSVs; returns the three paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "source": str(directory / "source.csv"),
        "target_train": str(directory / "target_train.csv"),
        "target_test": str(directory / "target_test.csv"),
    }
    _write_rows(paths["source"], ds.source_x, ds.source_y)
    _write_rows(paths["target_train"], ds.target_train_x, None)
    _write_rows(paths["target_test"], ds.target_test_x, ds.target_test_y)
    return paths


def _parse_csv(path, labelled: bool) -> tuple[np.ndarray, np.ndarray | None]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[-1] != "label" or any(h != f"f{i}" for i, h in enumerate(header[:-1])):
        raise DatasetError(f"{path}: header must be f0,...,f{{p-1}},label")
    p = len(header) - 1
    xs: list[list[float]] = []
    ys: list[int] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != p + 1:
            raise DatasetError(f"{path}: line {line_no}: expected {p + 1} cells, got {len(cells)}")
        try:
            xs.append([float(c) for c in cells[:-1]])
        except ValueError as err:
            raise DatasetError(f"{path}: line {line_no}: non-numeric feature cell") from err
        label_cell = cells[-1]
        if labelled:
            if label_cell == "":
                raise DatasetError(f"{path}: line {line_no}: missing label")
            try:
                ys.append(int(label_cell))
            except ValueError as err:
                raise DatasetError(f"{path}: line {line_no}: non-integer label") from err
        elif label_cell != "":
            raise DatasetError(
                f"{path}: line {line_no}: unlabeled file must have an empty label column"
            )
    x = np.asarray(xs, dtype=np.float64).reshape(len(xs), p)
    return x, (np.asarray(ys, dtype=np.intp) if labelled else None)


def load_csv_dataset(source_path, target_train_path, target_test_path) -> DomainDataset:
    """Parse the three-file CSV layout into a dataset, validating as it goes."""
    source_x, source_y = _parse_csv(source_path, labelled=True)
    train_x, _ = _parse_csv(target_train_path, labelled=False)
    test_x, test_y = _parse_csv(target_test_path, labelled=True)
    if source_x.shape[0] == 0 or test_x.shape[0] == 0:
        raise DatasetError("source and target test files must contain rows")
    p = source_x.shape[1]
    if train_x.shape[1] != p or test_x.shape[1] != p:
        raise DatasetError("feature counts differ between files")
    if source_y.min() < 0 or test_y.min(initial=0) < 0:
        raise DatasetError("labels must be nonnegative")
    n_classes = int(max(source_y.max(), test_y.max(initial=0))) + 1
    return DomainDataset(
        source_x=source_x,
        source_y=source_y,
        target_train_x=train_x,
        target_test_x=test_x,
        target_test_y=test_y,
        input_dim=p,
        n_classes=n_classes,
        provenance={
            "generator": "csv",
            "source": str(source_path),
            "target_train": str(target_train_path),
            "target_test": str(target_test_path),
        },
    )
