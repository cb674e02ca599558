"""Checkpoints, split manifests and CSV records.

Checkpoint archive layout (one file per checkpoint)::

    CRIS-CKPT\\n
    version <int>\\n
    sha256 <hex digest of payload>\\n
    <payload: torch.save of a plain dict>

The payload dict holds ``config`` (backbone/refinement config dicts),
``state_dict``, ``optimizer``, ``epoch``, ``history``, ``train_config`` and
``manifest_hash``. Every write goes to a temp file in the target directory,
is fsynced, renamed into place, then re-read and digest-checked.

CSV files start with one ``# cris-format <version> manifest <hash>`` line.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

from .backbones import Backbone, BackboneConfig, build_backbone
from .errors import (
    ConfigError,
    ConfigMismatchError,
    IntegrityError,
    ManifestMismatchError,
    VersionMismatchError,
)
from .metrics import EvalReport, PRPoint
from .refinement import FullModel, RefinementConfig, build_refinement, compose

FORMAT_VERSION = 1
_MAGIC = b"CRIS-CKPT"
_MANIFEST_HEADER = f"# cris-manifest {FORMAT_VERSION}"

PathLike = Union[str, Path]


def _atomic_write(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Model configuration
# ---------------------------------------------------------------------------


def model_config(model: nn.Module) -> Dict[str, Any]:
    """Serializable description of a Backbone or FullModel."""
    if isinstance(model, FullModel):
        ref_cfg = getattr(model.refinement, "config", None)
        if not isinstance(ref_cfg, RefinementConfig):
            raise ConfigError("Refinement module has no RefinementConfig; cannot serialize")
        return {"backbone": model.backbone.config.to_dict(), "refinement": ref_cfg.to_dict()}
    if isinstance(model, Backbone):
        return {"backbone": model.config.to_dict(), "refinement": None}
    raise ConfigError(f"Cannot serialize model of type {type(model).__name__}")


def build_model(config: Dict[str, Any]) -> Union[Backbone, FullModel]:
    backbone = build_backbone(BackboneConfig.from_dict(config["backbone"]))
    if config.get("refinement") is None:
        return backbone
    return compose(backbone, build_refinement(RefinementConfig.from_dict(config["refinement"])))


def _architecture(config: Dict[str, Any]) -> Dict[str, Any]:
    # seeds only affect initialization, not parameter layout
    def strip(d: Optional[Dict[str, Any]]) -> Optional[Dict[str, Any]]:
        return None if d is None else {k: v for k, v in d.items() if k != "seed"}

    return {"backbone": strip(config.get("backbone")), "refinement": strip(config.get("refinement"))}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: Union[Backbone, FullModel]
    optimizer_state: Optional[Dict[str, Any]]
    epoch: int
    config: Dict[str, Any]
    history: List[Dict[str, Any]] = field(default_factory=list)
    train_config: Optional[Dict[str, Any]] = None
    manifest_hash: str = ""


def save_checkpoint(
    model: nn.Module,
    opt_state: Optional[Dict[str, Any]],
    epoch: int,
    path: PathLike,
    *,
    history: Optional[List[Dict[str, Any]]] = None,
    train_config: Optional[Dict[str, Any]] = None,
    manifest_hash: str = "",
) -> Path:
    payload = {
        "config": model_config(model),
        "state_dict": model.state_dict(),
        "optimizer": opt_state,
        "epoch": int(epoch),
        "history": list(history or []),
        "train_config": train_config,
        "manifest_hash": manifest_hash,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    digest = sha256_hex(body)
    header = b"%s\nversion %d\nsha256 %s\n" % (_MAGIC, FORMAT_VERSION, digest.encode())
    path = _atomic_write(path, header + body)
    _, _, check = _read_archive(path)
    if check != digest:
        raise IntegrityError(f"Digest mismatch after writing {path}")
    return path


def _read_archive(path: Path) -> Tuple[int, bytes, str]:
    raw = path.read_bytes()
    if not raw:
        raise IntegrityError(f"Checkpoint {path} is empty")
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != _MAGIC:
        raise IntegrityError(f"{path} is not a cris checkpoint")
    try:
        version = int(parts[1].split(b" ", 1)[1])
        digest = parts[2].split(b" ", 1)[1].decode()
    except (IndexError, ValueError, UnicodeDecodeError):
        raise IntegrityError(f"Malformed checkpoint header in {path}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"Checkpoint {path} has format version {version}, expected {FORMAT_VERSION}"
        )
    body = parts[3]
    actual = sha256_hex(body)
    if actual != digest:
        raise IntegrityError(f"Checkpoint {path} failed its digest check (truncated or corrupt)")
    return version, body, actual


def load_checkpoint(
    path: PathLike, *, expected_config: Optional[Dict[str, Any]] = None
) -> Checkpoint:
    """Rebuild the model and training state stored at ``path``.

    With ``expected_config`` the stored architecture must match it.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    _, body, _ = _read_archive(path)
    payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=True)
    config = payload["config"]
    if expected_config is not None and _architecture(expected_config) != _architecture(config):
        raise ConfigMismatchError(
            f"Checkpoint {path} was written for {config}, expected {expected_config}"
        )
    model = build_model(config)
    model.load_state_dict(payload["state_dict"])
    return Checkpoint(
        model=model,
        optimizer_state=payload["optimizer"],
        epoch=payload["epoch"],
        config=config,
        history=payload["history"],
        train_config=payload["train_config"],
        manifest_hash=payload["manifest_hash"],
    )


def restore_into(model: nn.Module, ckpt: Checkpoint) -> None:
    """Copy checkpoint weights into an existing model of the same architecture."""
    if _architecture(model_config(model)) != _architecture(ckpt.config):
        raise ConfigMismatchError(
            f"Checkpoint config {ckpt.config} does not match model {model_config(model)}"
        )
    model.load_state_dict(ckpt.model.state_dict())


# ---------------------------------------------------------------------------
# Split manifests
# ---------------------------------------------------------------------------


def manifest_digest(assignments: Sequence[Tuple[str, str]]) -> str:
    text = "\n".join(f"{stem}\t{split}" for stem, split in assignments)
    return sha256_hex(text.encode())


def read_manifest(path: PathLike) -> Tuple[List[Tuple[str, str]], str]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise VersionMismatchError(f"{path} is not a version {FORMAT_VERSION} manifest")
    rows: List[Tuple[str, str]] = []
    digest = ""
    for line in lines[1:]:
        if line.startswith("# sha256 "):
            digest = line.split()[-1]
            continue
        stem, split = line.split("\t")
        rows.append((stem, split))
    if digest != manifest_digest(rows):
        raise IntegrityError(f"Manifest {path} failed its digest check")
    return rows, digest


def write_manifest(path: PathLike, assignments: Sequence[Tuple[str, str]]) -> str:
    """Write (stem, split) lines plus digest; an existing manifest must match."""
    path = Path(path)
    rows = [(str(s), str(p)) for s, p in assignments]
    digest = manifest_digest(rows)
    if path.exists():
        _, existing = read_manifest(path)
        if existing != digest:
            raise ManifestMismatchError(
                f"Split manifest {path} differs from the current split "
                f"({existing[:12]} vs {digest[:12]})"
            )
        return digest
    lines = [_MANIFEST_HEADER] + [f"{s}\t{p}" for s, p in rows] + [f"# sha256 {digest}"]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())
    return digest


# ---------------------------------------------------------------------------
# CSV records
# ---------------------------------------------------------------------------


def _fmt(value: Any) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_csv(
    path: PathLike, columns: Sequence[str], rows: Sequence[Sequence[Any]], manifest_hash: str = ""
) -> Path:
    buf = io.StringIO()
    buf.write(f"# cris-format {FORMAT_VERSION} manifest {manifest_hash or '-'}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return _atomic_write(path, buf.getvalue().encode())


def read_csv(path: PathLike) -> Tuple[List[Dict[str, str]], str]:
    """Rows as dicts plus the manifest hash from the header line."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# cris-format "):
        raise VersionMismatchError(f"{path} has no cris-format header")
    parts = lines[0].split()
    if int(parts[2]) != FORMAT_VERSION:
        raise VersionMismatchError(f"{path} has format version {parts[2]}")
    manifest_hash = "" if parts[4] == "-" else parts[4]
    return list(csv.DictReader(lines[1:])), manifest_hash


REPORT_COLUMNS = ("model", "dataset", "strategy", "dice", "mse", "best_threshold",
                  "manifest_hash", "format_version")


def write_report(report: EvalReport, directory: PathLike) -> Path:
    """Write report.csv, pr_curve.csv and per_image_dice.csv into ``directory``."""
    directory = Path(directory)
    h = report.manifest_hash
    write_csv(directory / "report.csv", REPORT_COLUMNS, [[
        report.model, report.dataset, report.strategy, float(report.dice), float(report.mse),
        float(report.best_threshold), h or "-", FORMAT_VERSION,
    ]], h)
    write_pr_curve(report.pr_curve, directory / "pr_curve.csv", h)
    write_csv(directory / "per_image_dice.csv", ("index", "dice"),
              [[i, float(d)] for i, d in enumerate(report.per_image_dice)], h)
    return directory / "report.csv"


def write_pr_curve(points: Sequence[PRPoint], path: PathLike, manifest_hash: str = "") -> Path:
    return write_csv(path, ("threshold", "precision", "recall"),
                     [[float(p.threshold), float(p.precision), float(p.recall)] for p in points],
                     manifest_hash)


def read_pr_curve(path: PathLike) -> List[PRPoint]:
    rows, _ = read_csv(path)
    return [PRPoint(float(r["threshold"]), float(r["precision"]), float(r["recall"])) for r in rows]


def read_report(directory: PathLike) -> EvalReport:
    directory = Path(directory)
    rows, _ = read_csv(directory / "report.csv")
    if len(rows) != 1:
        raise IntegrityError(f"{directory / 'report.csv'} must contain exactly one row")
    row = rows[0]
    per_image, _ = read_csv(directory / "per_image_dice.csv")
    return EvalReport(
        dice=float(row["dice"]),
        mse=float(row["mse"]),
        best_threshold=float(row["best_threshold"]),
        pr_curve=read_pr_curve(directory / "pr_curve.csv"),
        per_image_dice=[float(r["dice"]) for r in per_image],
        model=row["model"],
        dataset=row["dataset"],
        strategy=row["strategy"],
        manifest_hash="" if row["manifest_hash"] == "-" else row["manifest_hash"],
    )
