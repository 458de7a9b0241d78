"""
File formats for gpsubspace
CSV matrices with a one-line shape header, parameter-point tables, training datasets,
and persisted GPS models
"""

import json
import logging
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from error_handler import MalformedInputError, ShapeMismatchError
from gps import GpsModel, factor_corr, fit
from grassmann import StiefelBasis
from kernel import KernelSpec, as_points

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_KEYS = ("n", "k", "l", "d", "r")
HEADER = re.compile(r"^#\s*(stiefel|matrix|index)\s+n=(\d+)\s+k=(\d+)\s*$")
PathLike = Union[str, os.PathLike]


def _read_header(path: Path) -> Tuple[str, int, int]:
    try:
        with open(path, "r") as f:
            first = f.readline().strip()
    except OSError as e:
        raise MalformedInputError(f"cannot read {path}: {e}", context={"file": str(path)})
    match = HEADER.match(first)
    if not match:
        raise MalformedInputError(f"malformed header in {path}: {first!r}", context={"file": str(path)})
    return match.group(1), int(match.group(2)), int(match.group(3))


def read_matrix(path: PathLike, kind: Optional[str] = None) -> np.ndarray:
    """
    Read a CSV matrix whose first line is `# <kind> n=<rows> k=<cols>`

    Parameters:
    -----------
    path : str or PathLike
        File to read
    kind : str, optional
        Required header kind ("stiefel", "matrix" or "index")

    Returns:
    --------
    np.ndarray
        The rows x cols matrix
    """
    path = Path(path)
    found, rows, cols = _read_header(path)
    if kind is not None and found != kind:
        raise MalformedInputError(f"{path} holds a {found!r} matrix, expected {kind!r}",
                                  context={"file": str(path)})
    try:
        frame = pd.read_csv(path, skiprows=1, header=None, float_precision="round_trip")
        values = frame.to_numpy(dtype=float)
    except (OSError, ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise MalformedInputError(f"cannot parse {path}: {e}", context={"file": str(path)})
    if values.shape != (rows, cols):
        raise MalformedInputError(f"{path} declares {rows}x{cols} but holds {values.shape[0]}x{values.shape[1]}",
                                  context={"file": str(path)})
    if not np.all(np.isfinite(values)):
        raise MalformedInputError(f"{path} contains non-finite entries", context={"file": str(path)})
    return values


def write_matrix(path: PathLike, matrix: np.ndarray, kind: str = "matrix") -> None:
    matrix = np.atleast_2d(np.asarray(matrix))
    path = Path(path)
    with open(path, "w") as f:
        f.write(f"# {kind} n={matrix.shape[0]} k={matrix.shape[1]}\n")
        pd.DataFrame(matrix).to_csv(f, header=False, index=False, float_format="%.17g")


def read_stiefel(path: PathLike) -> StiefelBasis:
    return StiefelBasis(read_matrix(path, "stiefel"))


def write_stiefel(path: PathLike, basis: StiefelBasis) -> None:
    write_matrix(path, basis.entries, "stiefel")


def read_points(path: PathLike) -> np.ndarray:
    """Parameter points, one row per point; a header row of column names is optional"""
    path = Path(path)
    try:
        frame = pd.read_csv(path, comment="#", float_precision="round_trip")
        if not all(_is_name(c) for c in frame.columns):
            frame = pd.read_csv(path, comment="#", header=None, float_precision="round_trip")
        return as_points(frame.to_numpy(dtype=float))
    except (OSError, ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise MalformedInputError(f"cannot parse points in {path}: {e}", context={"file": str(path)})


def _is_name(column: Any) -> bool:
    try:
        float(column)
        return False
    except (TypeError, ValueError):
        return True


def write_points(path: PathLike, points: np.ndarray) -> None:
    points = as_points(points)
    columns = [f"theta_{j + 1}" for j in range(points.shape[1])]
    pd.DataFrame(points, columns=columns).to_csv(path, index=False, float_format="%.17g")


class MatrixStore:
    """
    Reads and writes datasets and models under a root directory,
    caching matrices already read

    Parameters:
    -----------
    root : str or PathLike, optional
        Base directory for relative paths
    """

    def __init__(self, root: Optional[PathLike] = None):
        self.root = Path(root) if root is not None else Path(".")
        self.matrix_cache: Dict[Tuple[str, Optional[str]], np.ndarray] = {}

    def _path(self, path: PathLike) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.root / path

    def matrix(self, path: PathLike, kind: Optional[str] = None) -> np.ndarray:
        """Cached read_matrix"""
        resolved = self._path(path)
        key = (str(resolved), kind)
        if key not in self.matrix_cache:
            self.matrix_cache[key] = read_matrix(resolved, kind)
        return self.matrix_cache[key]

    def load_dataset(self, data_dir: PathLike) -> Tuple[np.ndarray, List[StiefelBasis]]:
        """
        Training data: points.csv plus basis_<i>.csv for i = 0 .. l-1 in row order

        Returns:
        --------
        Tuple[np.ndarray, List[StiefelBasis]]
            Points and bases
        """
        data_dir = self._path(data_dir)
        points = read_points(data_dir / "points.csv")
        bases = []
        for i in range(points.shape[0]):
            path = data_dir / f"basis_{i}.csv"
            if not path.exists():
                raise MalformedInputError(f"missing basis file {path}", context={"file": str(path)})
            bases.append(StiefelBasis(self.matrix(path, "stiefel")))
        shapes = {(b.n, b.k) for b in bases}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"bases in {data_dir} disagree in shape: {sorted(shapes)}")
        return points, bases

    def save_dataset(self, data_dir: PathLike, points: np.ndarray, bases: Sequence[StiefelBasis]) -> None:
        data_dir = self._path(data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)
        write_points(data_dir / "points.csv", points)
        for i, basis in enumerate(bases):
            write_stiefel(data_dir / f"basis_{i}.csv", basis)

    def save_model(self, model_dir: PathLike, model: GpsModel) -> None:
        """Persist a fitted model as a manifest, kernel JSON, points and CSV matrices"""
        model_dir = self._path(model_dir)
        model_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": FORMAT_VERSION,
            "n": model.n, "k": model.k, "l": model.l, "d": model.d,
            "r": model.rank, "eta": model.eta
        }
        (model_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
        (model_dir / "kernel.json").write_text(model.kernel.to_json())
        write_points(model_dir / "points.csv", model.points)
        write_matrix(model_dir / "gram.csv", model.gram)
        write_matrix(model_dir / "global_basis.csv", model.global_basis, "stiefel")
        write_matrix(model_dir / "triangular.csv", model.triangular)
        write_matrix(model_dir / "pivot.csv", model.pivot[:, None], "index")
        for i, basis in enumerate(model.bases):
            write_stiefel(model_dir / f"basis_{i}.csv", basis)
        logger.info(f"Saved model to {model_dir}")

    def load_model(self, model_dir: PathLike) -> GpsModel:
        """Read a model written by save_model without refitting"""
        model_dir = self._path(model_dir)
        try:
            manifest = json.loads((model_dir / "manifest.json").read_text())
            kernel = KernelSpec.from_json((model_dir / "kernel.json").read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise MalformedInputError(f"cannot read model in {model_dir}: {e}",
                                      context={"directory": str(model_dir)})
        if manifest.get("format_version") != FORMAT_VERSION:
            raise MalformedInputError(f"unsupported model format {manifest.get('format_version')!r}")

        missing = [key for key in MANIFEST_KEYS if key not in manifest]
        if missing:
            raise MalformedInputError(f"manifest in {model_dir} lacks {missing}",
                                      context={"directory": str(model_dir)})
        try:
            n, k, l, d, r = (int(manifest[key]) for key in MANIFEST_KEYS)
        except (TypeError, ValueError) as e:
            raise MalformedInputError(f"manifest in {model_dir} has a non-integer size: {e}")

        points, bases = self.load_dataset(model_dir)
        if points.shape[1] != d:
            raise ShapeMismatchError(f"points in {model_dir} have dimension {points.shape[1]}, manifest says {d}")
        kernel.scales_for(d)
        gram = self.matrix(model_dir / "gram.csv", "matrix")
        global_basis = self.matrix(model_dir / "global_basis.csv", "stiefel")
        triangular = self.matrix(model_dir / "triangular.csv", "matrix")
        pivot = self.matrix(model_dir / "pivot.csv", "index")[:, 0].astype(int)
        if (len(bases) != l or bases[0].n != n or bases[0].k != k or gram.shape != (k * l, k * l)
                or global_basis.shape != (n, r) or triangular.shape != (r, k * l)
                or sorted(pivot.tolist()) != list(range(k * l))):
            raise ShapeMismatchError(f"model files in {model_dir} disagree with the manifest")

        corr, factor = factor_corr(kernel, points)
        return GpsModel(
            points=points, bases=tuple(bases), kernel=kernel, gram=gram,
            global_basis=global_basis, triangular=triangular, pivot=pivot, rank=r,
            eta=float(manifest.get("eta", 1e-10)), corr=corr, corr_factor=factor
        )

    def fit_dataset(self, data_dir: PathLike, kernel: KernelSpec) -> GpsModel:
        points, bases = self.load_dataset(data_dir)
        return fit(points, bases, kernel)
