"""Feature extraction (pretrained ONNX backbone or handcrafted baseline) and
the binary feature-matrix file format.

File layout, little-endian::

    b"MDFM" | version u16 | n u64 | d u64 | n*d float32 row-major
    | n x (u32 byte length + UTF-8 id) | u32 byte length + UTF-8 extractor tag
"""
from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, ModelError, ShapeError
from .imaging import INPUT_SIZE, ImageTensor

MAGIC = b"MDFM"
FORMAT_VERSION = 1

# torchvision / ImageNet channel statistics
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class FeatureMatrix:
    ids: list[str]
    X: np.ndarray
    extractor_tag: str

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float32)
        if self.X.ndim != 2:
            raise ShapeError(f"feature matrix must be 2-D, got shape {self.X.shape}")
        if self.X.shape[0] != len(self.ids):
            raise ShapeError(f"{self.X.shape[0]} rows but {len(self.ids)} ids")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("feature matrix contains NaN or Inf")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def select(self, ids: Sequence[str]) -> "FeatureMatrix":
        """Rows for ``ids`` in the given order."""
        pos = {k: i for i, k in enumerate(self.ids)}
        missing = [k for k in ids if k not in pos]
        if missing:
            raise KeyError(f"{len(missing)} ids not in feature matrix, e.g. {missing[0]!r}")
        rows = [pos[k] for k in ids]
        return FeatureMatrix(list(ids), self.X[rows].reshape(len(rows), self.d), self.extractor_tag)


@dataclass
class ExtractorSpec:
    kind: str = "baseline"  # "backbone" or "baseline"
    model_path: Optional[str] = None
    standardize: bool = True
    output_name: Optional[str] = None
    grid: int = 4
    bins: int = 16
    batch_size: int = 32

    def __post_init__(self):
        if self.kind not in ("backbone", "baseline"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "backbone" and not self.model_path:
            raise ModelError("backbone extractor needs model_path")
        if self.kind == "baseline" and (self.bins < 2 or self.grid < 1):
            raise ValueError("baseline extractor needs bins >= 2 and grid >= 1")

    def tag(self) -> str:
        if self.kind == "baseline":
            return f"baseline:grid={self.grid}:bins={self.bins}"
        digest = _file_digest(self.model_path)
        return f"backbone:{digest}:{self.output_name or 'default'}:std={int(self.standardize)}"


def _file_digest(path) -> str:
    try:
        h = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise ModelError(f"cannot read model {path}: {exc}") from exc
    return h[:16]


def _check_tensors(tensors: Sequence[ImageTensor]) -> None:
    for t in tensors:
        if t.data.shape != (INPUT_SIZE, INPUT_SIZE, 3):
            raise ShapeError(f"{t.source_id or 'tensor'}: shape {t.data.shape}, expected "
                             f"({INPUT_SIZE}, {INPUT_SIZE}, 3)")


# -- baseline ---------------------------------------------------------------

def baseline_vector(gray: np.ndarray, grid: int, bins: int) -> np.ndarray:
    """Per-cell intensity histogram (fractions) plus mean gradient magnitude.

    Cells are laid out row-major over a ``grid x grid`` partition; each cell
    contributes ``bins + 1`` values.
    """
    gray = np.asarray(gray, dtype=np.float64)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    # value 1.0 lands in the last bin
    bin_idx = np.minimum((gray * bins).astype(np.intp), bins - 1)
    rows = np.array_split(np.arange(gray.shape[0]), grid)
    cols = np.array_split(np.arange(gray.shape[1]), grid)
    out = np.empty(grid * grid * (bins + 1), dtype=np.float64)
    k = 0
    for r in rows:
        for c in cols:
            cell = bin_idx[np.ix_(r, c)]
            out[k:k + bins] = np.bincount(cell.ravel(), minlength=bins) / cell.size
            out[k + bins] = mag[np.ix_(r, c)].mean()
            k += bins + 1
    return out


def extract_baseline(spec: ExtractorSpec, tensors: Sequence[ImageTensor]) -> FeatureMatrix:
    _check_tensors(tensors)
    d = spec.grid * spec.grid * (spec.bins + 1)
    X = np.zeros((len(tensors), d), dtype=np.float32)
    for i, t in enumerate(tensors):
        X[i] = baseline_vector(t.data[:, :, 0], spec.grid, spec.bins)
    return FeatureMatrix([t.source_id for t in tensors], X, spec.tag())


# -- backbone ---------------------------------------------------------------

class Backbone:
    """An ONNX network whose output is one feature vector per image."""

    def __init__(self, model_path, output_name: Optional[str] = None):
        try:
            import onnxruntime as ort
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ModelError("onnxruntime is required for the backbone extractor") from exc
        if not Path(model_path).is_file():
            raise ModelError(f"model file not found: {model_path}")
        opts = ort.SessionOptions()
        opts.intra_op_num_threads = 1
        try:
            self.session = ort.InferenceSession(str(model_path), opts,
                                                providers=["CPUExecutionProvider"])
        except Exception as exc:
            raise ModelError(f"cannot load model {model_path}: {exc}") from exc
        inputs = self.session.get_inputs()
        if len(inputs) != 1:
            raise ModelError(f"expected one model input, found {len(inputs)}")
        self.input_name = inputs[0].name
        shape = list(inputs[0].shape)
        if len(shape) != 4:
            raise ModelError(f"model input must be 4-D, got {shape}")
        if shape[1] == 3:
            self.layout = "NCHW"
            spatial = shape[2:]
        elif shape[3] == 3:
            self.layout = "NHWC"
            spatial = shape[1:3]
        else:
            raise ModelError(f"cannot find a 3-channel axis in model input {shape}")
        if any(isinstance(s, int) and s != INPUT_SIZE for s in spatial):
            raise ModelError(f"model input {shape} is not {INPUT_SIZE}x{INPUT_SIZE}")
        outputs = {o.name: o for o in self.session.get_outputs()}
        self.output_name = output_name or self.session.get_outputs()[0].name
        if self.output_name not in outputs:
            raise ModelError(f"model has no output {self.output_name!r}; have {sorted(outputs)}")
        out_shape = outputs[self.output_name].shape
        tail = out_shape[1:]
        if tail and all(isinstance(s, int) for s in tail):
            self.d = int(np.prod(tail))
        else:
            probe = np.zeros((1, INPUT_SIZE, INPUT_SIZE, 3), dtype=np.float32)
            self.d = self._run(probe).shape[1]

    def _run(self, batch_nhwc: np.ndarray) -> np.ndarray:
        x = batch_nhwc if self.layout == "NHWC" else np.transpose(batch_nhwc, (0, 3, 1, 2))
        out = self.session.run([self.output_name], {self.input_name: np.ascontiguousarray(x)})[0]
        return np.asarray(out, dtype=np.float32).reshape(out.shape[0], -1)

    def __call__(self, batch_nhwc: np.ndarray) -> np.ndarray:
        return self._run(batch_nhwc)


def extract_backbone(spec: ExtractorSpec, tensors: Sequence[ImageTensor],
                     backbone: Optional[Backbone] = None) -> FeatureMatrix:
    _check_tensors(tensors)
    net = backbone or Backbone(spec.model_path, spec.output_name)
    X = np.zeros((len(tensors), net.d), dtype=np.float32)
    for start in range(0, len(tensors), spec.batch_size):
        chunk = tensors[start:start + spec.batch_size]
        batch = np.stack([t.data for t in chunk]).astype(np.float32)
        if spec.standardize:
            batch = (batch - IMAGENET_MEAN) / IMAGENET_STD
        feats = net(batch)
        if feats.shape[1] != net.d:
            raise ShapeError(f"model produced {feats.shape[1]} features, expected {net.d}")
        X[start:start + len(chunk)] = feats
    return FeatureMatrix([t.source_id for t in tensors], X, spec.tag())


def extract(spec: ExtractorSpec, tensors: Sequence[ImageTensor]) -> FeatureMatrix:
    if spec.kind == "baseline":
        return extract_baseline(spec, tensors)
    return extract_backbone(spec, tensors)


def _load_tensor(args):
    from .imaging import load_tensor

    path, key = args
    return load_tensor(path, key)


def _baseline_from_path(args):
    path, key, grid, bins = args
    t = _load_tensor((path, key))
    return baseline_vector(t.data[:, :, 0], grid, bins)


def extract_paths(spec: ExtractorSpec, items: Sequence[tuple[str, str]], jobs: int = 1) -> FeatureMatrix:
    """Extract features for ``(image path, record key)`` pairs, rows in input order."""
    items = list(items)
    ids = [k for _, k in items]

    def pmap(fn, args):
        if jobs > 1 and len(args) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                return list(ex.map(fn, args, chunksize=max(1, len(args) // (4 * jobs))))
        return [fn(a) for a in args]

    if spec.kind == "baseline":
        rows = pmap(_baseline_from_path, [(p, k, spec.grid, spec.bins) for p, k in items])
        d = spec.grid * spec.grid * (spec.bins + 1)
        X = np.array(rows, dtype=np.float32).reshape(len(rows), d)
        return FeatureMatrix(ids, X, spec.tag())

    net = Backbone(spec.model_path, spec.output_name)
    X = np.zeros((len(items), net.d), dtype=np.float32)
    for start in range(0, len(items), spec.batch_size):
        tensors = pmap(_load_tensor, items[start:start + spec.batch_size])
        X[start:start + len(tensors)] = extract_backbone(spec, tensors, net).X
    return FeatureMatrix(ids, X, spec.tag())


# -- file format ------------------------------------------------------------

def save_features(fm: FeatureMatrix, path) -> None:
    parts = [MAGIC, struct.pack("<HQQ", FORMAT_VERSION, fm.n, fm.d),
             fm.X.astype("<f4", copy=False).tobytes(order="C")]
    for s in list(fm.ids) + [fm.extractor_tag]:
        b = s.encode("utf-8")
        parts.append(struct.pack("<I", len(b)))
        parts.append(b)
    Path(path).write_bytes(b"".join(parts))


def load_features(path) -> FeatureMatrix:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a feature file (bad magic)")
    if len(buf) < 22:
        raise FormatError(f"{path}: truncated header")
    version, n, d = struct.unpack_from("<HQQ", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: feature format version {version}, expected {FORMAT_VERSION}")
    off = 22
    nbytes = n * d * 4
    if len(buf) < off + nbytes:
        raise FormatError(f"{path}: truncated feature data")
    X = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float32)
    off += nbytes
    strings = []
    for _ in range(n + 1):
        if len(buf) < off + 4:
            raise FormatError(f"{path}: truncated string table")
        (length,) = struct.unpack_from("<I", buf, off)
        off += 4
        if len(buf) < off + length:
            raise FormatError(f"{path}: truncated string table")
        try:
            strings.append(buf[off:off + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: bad UTF-8 in string table") from exc
        off += length
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return FeatureMatrix(strings[:n], X, strings[n])
