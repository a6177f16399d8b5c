import json
import hashlib
import os

from dataclasses import dataclass, field
from typing import Any, Dict, List, Iterable

from . import __version__
from .common.errors import Diagnostic

MANIFEST = "manifest.json"


def file_digest(path: str) -> str:
    """
    SHA-256 of a file's content as hex string
    """
    sha = hashlib.sha256()
    with open(path, "rb") as fp:
        for chunk in iter(lambda: fp.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def canonical_json(content: Any) -> str:
    return json.dumps(content, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=True)


@dataclass
class RunManifest:
    """
    what a subcommand read, produced and found

    ``inputs`` and ``outputs`` map stable names (not paths) to content digests.
    The digest covers everything but the timings.
    """

    stage: str
    config: Dict[str, Any]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    diagnostics: List[Dict[str, str]] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    version: str = __version__

    def add_input(self, name: str, path: str):
        self.inputs[name] = file_digest(path)

    def add_outputs(self, directory: str, names: Iterable[str]):
        for name in names:
            self.outputs[name] = file_digest(os.path.join(directory, name))

    def add_diagnostics(self, diagnostics: Iterable[Diagnostic]):
        self.diagnostics.extend(d.as_record() for d in diagnostics)

    def content(self, timings: bool = True) -> Dict[str, Any]:
        content: Dict[str, Any] = {
            "stage": self.stage,
            "version": self.version,
            "config": self.config,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "diagnostics": list(self.diagnostics),
        }
        if timings:
            content["timings"] = dict(self.timings)
        return content

    @property
    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.content(timings=False)).encode("ascii")).hexdigest()

    def write(self, directory: str) -> str:
        """
        writes ``manifest.json`` into ``directory`` and returns its path
        """
        path = os.path.join(directory, MANIFEST)
        content = self.content()
        content["digest"] = self.digest
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(content, fp, indent=2, sort_keys=True)
            fp.write("\n")
        return path
