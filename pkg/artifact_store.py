"""
Artifact persistence: datasets, manifests, calibration pairs, GPR models, weights and loss history.
"""
import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from exceptions import MissingArtifactError, SchemaError
from real2sim_calibration import GPRModel, MomentCalibration, PreprocessConfig
from sensor_surrogate import CalibrationPair
from sweep_datagen import SignalSequence
from whiskernet import ModelParams, Normalization, WhiskerNetConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WEIGHTS_MAGIC = b"WHSKNET\0"
LOSS_COLUMNS = ["epoch", "train_mse", "val_mse"]

PathLike = Union[str, Path]


def _dumps(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def file_digest(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def require(path: PathLike, hint: str) -> Path:
    """Return `path` if it exists, otherwise raise MissingArtifactError with `hint`."""
    path = Path(path)
    if not path.exists():
        logger.error(f"Missing artifact {path}")
        raise MissingArtifactError(str(path), hint)
    return path


def _read_jsonl(path: PathLike) -> Iterable[Tuple[int, Dict[str, Any]]]:
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON ({e.msg})", str(path), number) from e
            if not isinstance(record, dict):
                raise SchemaError("expected a JSON object", str(path), number)
            if record.get("schema_version") != SCHEMA_VERSION:
                raise SchemaError(f"unsupported schema_version {record.get('schema_version')!r}", str(path), number)
            yield number, record


# ---------------------------------------------------------------------------
# Dataset and manifest
# ---------------------------------------------------------------------------

def save_dataset(sequences: Sequence[SignalSequence], path: PathLike) -> str:
    """Write one sequence per line; returns the file's sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for seq in sequences:
            f.write(_dumps({**seq.to_dict(), "schema_version": SCHEMA_VERSION}) + "\n")
    digest = file_digest(path)
    logger.info(f"Wrote {len(sequences)} sequences to {path}")
    return digest


def load_dataset(path: PathLike) -> List[SignalSequence]:
    path = require(path, "Run the 'gen' command first.")
    sequences = []
    for number, record in _read_jsonl(path):
        try:
            sequences.append(SignalSequence.from_dict(record))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"malformed sequence record ({e})", str(path), number) from e
    return sequences


def build_manifest(config_digest: str, master_seed: int, files: Mapping[str, str], counts: Mapping[str, int],
                   rejects: Mapping[str, int]) -> Dict[str, Any]:
    """Manifest dict; the corpus hash covers the sorted (name, digest) list."""
    corpus = hashlib.sha256(_dumps(sorted(files.items())).encode()).hexdigest()
    return {
        "schema_version": SCHEMA_VERSION,
        "config_digest": config_digest,
        "master_seed": master_seed,
        "files": dict(sorted(files.items())),
        "counts": dict(sorted(counts.items())),
        "rejects": dict(sorted(rejects.items())),
        "corpus_hash": corpus,
    }


def save_manifest(manifest: Mapping[str, Any], path: PathLike) -> None:
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_manifest(path: PathLike) -> Dict[str, Any]:
    path = require(path, "Run the 'gen' command first.")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON ({e.msg})", str(path), e.lineno) from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {manifest.get('schema_version')!r}", str(path))
    return manifest


def verify_manifest(manifest: Mapping[str, Any], directory: PathLike) -> None:
    """Raise SchemaError if any listed file no longer matches its recorded digest."""
    for name, digest in manifest["files"].items():
        path = require(Path(directory) / name, "Regenerate the dataset with the 'gen' command.")
        if file_digest(path) != digest:
            raise SchemaError("file digest does not match the manifest", str(path))


# ---------------------------------------------------------------------------
# Calibration pairs and GPR model
# ---------------------------------------------------------------------------

def save_pairs(pairs: Sequence[CalibrationPair], path: PathLike) -> None:
    with open(path, "w") as f:
        for pair in pairs:
            f.write(_dumps({**pair.to_dict(), "schema_version": SCHEMA_VERSION}) + "\n")


def load_pairs(path: PathLike) -> List[CalibrationPair]:
    """Read calibration pairs; a malformed line raises SchemaError naming the file and line."""
    path = require(path, "Run the 'calibrate' command to generate rig pairs.")
    pairs = []
    for number, record in _read_jsonl(path):
        try:
            wavelength = tuple(float(v) for v in record["wavelength"])
            moment = tuple(float(v) for v in record["moment"])
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"malformed calibration pair ({e})", str(path), number) from e
        if len(wavelength) != 2 or len(moment) != 2:
            raise SchemaError("wavelength and moment must have 2 channels", str(path), number)
        pairs.append(CalibrationPair(wavelength, moment))
    return pairs


def save_calibration(calibration: MomentCalibration, path: PathLike) -> None:
    first = calibration.channels[0]
    document = {
        "schema_version": SCHEMA_VERSION,
        "kernel_radius": first.kernel_radius,
        "noise_variance": first.noise_variance,
        "jitter": first.jitter,
        "preprocess": {
            "smoothing_window": calibration.preprocess.smoothing_window,
            "activity_threshold": calibration.preprocess.activity_threshold,
        },
        "channels": [
            {
                "train_inputs": model.train_inputs.tolist(),
                "train_targets": model.train_targets.tolist(),
                "alpha": model.alpha.tolist(),
            }
            for model in calibration.channels
        ],
    }
    Path(path).write_text(json.dumps(document, sort_keys=True, indent=2) + "\n")
    logger.info(f"Saved {len(calibration.channels)}-channel calibration to {path}")


def load_calibration(path: PathLike) -> MomentCalibration:
    path = require(path, "Run the 'calibrate' command first.")
    try:
        document = json.loads(path.read_text())
        if document.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {document.get('schema_version')!r}", str(path))
        channels = tuple(
            GPRModel(
                train_inputs=np.asarray(c["train_inputs"], dtype=float),
                train_targets=np.asarray(c["train_targets"], dtype=float),
                kernel_radius=float(document["kernel_radius"]),
                noise_variance=float(document["noise_variance"]),
                alpha=np.asarray(c["alpha"], dtype=float),
                jitter=float(document["jitter"]),
            )
            for c in document["channels"]
        )
        preprocess = PreprocessConfig(**document.get("preprocess", {}))
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON ({e.msg})", str(path), e.lineno) from e
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"malformed calibration model ({e})", str(path)) from e
    if not channels:
        raise SchemaError("calibration model has no channels", str(path))
    return MomentCalibration(channels, preprocess)


# ---------------------------------------------------------------------------
# Model weights
# ---------------------------------------------------------------------------

def save_weights(params: ModelParams, path: PathLike) -> None:
    """
    Binary weights file: magic, uint32 schema version, uint32 header length,
    UTF-8 JSON header, then every tensor as little-endian float64 in index order.
    """
    index = [{"name": name, "shape": list(value.shape)} for name, value in params.tensors.items()]
    header = _dumps({
        "config": {k: getattr(params.config, k) for k in params.config.__dataclass_fields__},
        "normalization": params.norm.to_dict(),
        "tensors": index,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", SCHEMA_VERSION, len(header)))
        f.write(header)
        for value in params.tensors.values():
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    logger.info(f"Saved {params.n_parameters()} parameters to {path}")


def load_weights(path: PathLike) -> ModelParams:
    path = require(path, "Run the 'train' command to produce model weights.")
    data = path.read_bytes()
    if not data.startswith(WEIGHTS_MAGIC):
        raise SchemaError("not a WhiskerNet weights file", str(path))
    offset = len(WEIGHTS_MAGIC)
    try:
        version, header_len = struct.unpack_from("<II", data, offset)
    except struct.error as e:
        raise SchemaError("truncated weights header", str(path)) from e
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version}", str(path))
    offset += 8
    try:
        header = json.loads(data[offset:offset + header_len].decode("utf-8"))
        config = WhiskerNetConfig(**header["config"])
        norm = Normalization.from_dict(header["normalization"])
        index = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise SchemaError(f"malformed weights header ({e})", str(path)) from e
    offset += header_len

    tensors: Dict[str, np.ndarray] = {}
    for entry in index:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise SchemaError(f"tensor '{entry['name']}' is truncated", str(path))
        tensors[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(data):
        raise SchemaError(f"{len(data) - offset} trailing bytes after the last tensor", str(path))
    params = ModelParams(config, tensors, norm)
    params.validate()
    return params


# ---------------------------------------------------------------------------
# Loss history
# ---------------------------------------------------------------------------

def save_loss_history(history: Sequence[Tuple[int, float, float]], path: PathLike) -> None:
    pd.DataFrame(list(history), columns=LOSS_COLUMNS).to_csv(path, index=False, float_format="%.10g")


def load_loss_history(path: PathLike, columns: Optional[List[str]] = None) -> pd.DataFrame:
    path = require(path, "Run the 'train' command first.")
    frame = pd.read_csv(path)
    missing = [c for c in (columns or LOSS_COLUMNS) if c not in frame.columns]
    if missing:
        raise SchemaError(f"missing column(s) {missing}", str(path))
    return frame
