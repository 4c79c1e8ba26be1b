"""
Output Manifests
Every artifact gets a ``<name>.manifest.json`` sidecar recording the
producing command, input/output sha256 digests, the config hash and
library versions. Manifests carry no timestamps so reruns are
byte-identical.
"""
import hashlib
import json
import logging
import platform
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import scipy

from src.core.errors import ArtifactError

logger = logging.getLogger(__name__)

PIPELINE_VERSION = "1.0.0"
SCHEMA_VERSION = 1
MANIFEST_SUFFIX = ".manifest.json"


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def versions() -> Dict[str, str]:
    return {
        "pipeline": PIPELINE_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def manifest_path(output: str) -> Path:
    out = Path(output)
    return out.with_name(out.name + MANIFEST_SUFFIX)


def _relative(path: Path, root: Optional[Path]) -> str:
    if root is None:
        return path.name
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return path.name


def write_manifest(
    output: str,
    command: str,
    inputs: Sequence[str],
    config_hash: str,
    root: Optional[str] = None,
    extra: Optional[Mapping[str, Any]] = None
) -> Path:
    """
    Write the manifest beside ``output``.

    Args:
        output: artifact just written
        command: producing CLI command
        inputs: files the artifact was computed from
        config_hash: RunConfig.config_hash()
        root: directory paths are recorded relative to
        extra: command-specific fields (JSON-serializable)
    """
    out = Path(output)
    base = Path(root) if root is not None else None
    manifest = {
        "command": command,
        "schema_version": SCHEMA_VERSION,
        "output": {"path": _relative(out, base), "sha256": sha256_file(str(out))},
        "inputs": [{"path": _relative(Path(p), base), "sha256": sha256_file(str(p))} for p in inputs],
        "config_hash": config_hash,
        "versions": versions(),
    }
    if extra:
        manifest["extra"] = dict(extra)
    target = manifest_path(str(out))
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.debug(f"Manifest written: {target}")
    return target


def read_manifest(output: str, producer: Optional[str] = None) -> Dict[str, Any]:
    """Load and version-check the manifest of an upstream artifact."""
    target = manifest_path(output)
    if not target.exists():
        raise ArtifactError(f"manifest missing for {output}", producer=producer)
    manifest = json.loads(target.read_text(encoding="utf-8"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ArtifactError(
            f"{output} was written with schema {manifest.get('schema_version')}, expected {SCHEMA_VERSION}",
            producer=producer,
        )
    return manifest


def require_artifact(path: Path, producer: str) -> Path:
    """Fail with the producing command's name when an upstream file is missing."""
    if not Path(path).exists():
        raise ArtifactError(f"missing upstream artifact {path}", producer=producer)
    read_manifest(str(path), producer)
    return Path(path)
