import hashlib
import json
import os
import tempfile
import unittest

from pcinf.common.errors import Diagnostic
from pcinf.manifest import MANIFEST, RunManifest, canonical_json, file_digest


class ManifestTest(unittest.TestCase):
    def manifest(self, directory: str) -> RunManifest:
        path = os.path.join(directory, "ranking.csv")
        with open(path, "w", encoding="utf-8") as fp:
            fp.write("rank,ticker,d_value\n1,A,0.5\n")

        manifest = RunManifest(stage="influence", config={"significance": {"level": 0.02}})
        manifest.add_input("prices", path)
        manifest.add_outputs(directory, ["ranking.csv"])
        manifest.add_diagnostics([Diagnostic("correlation_engine", "E_SINGULAR", "1 triple skipped")])
        return manifest

    def test_file_digest(self):
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "data")
            with open(path, "wb") as fp:
                fp.write(b"pcinf")
            self.assertEqual(hashlib.sha256(b"pcinf").hexdigest(), file_digest(path))

    def test_canonical_json(self):
        self.assertEqual('{"a":[1,2],"b":1}', canonical_json({"b": 1, "a": [1, 2]}))

    def test_digest_ignores_timings(self):
        with tempfile.TemporaryDirectory() as directory:
            manifest = self.manifest(directory)
            digest = manifest.digest
            manifest.timings["influence"] = 1.5
            self.assertEqual(digest, manifest.digest)

            manifest.config["significance"]["level"] = 0.05
            self.assertNotEqual(digest, manifest.digest)

    def test_write(self):
        with tempfile.TemporaryDirectory() as directory:
            manifest = self.manifest(directory)
            manifest.timings["influence"] = 0.25
            path = manifest.write(directory)

            with open(path, "r", encoding="utf-8") as fp:
                content = json.load(fp)

        self.assertEqual(MANIFEST, os.path.basename(path))
        self.assertEqual(manifest.digest, content["digest"])
        self.assertEqual({"influence": 0.25}, content["timings"])
        self.assertEqual(["prices"], list(content["inputs"]))
        self.assertEqual(content["inputs"]["prices"], content["outputs"]["ranking.csv"])
        self.assertEqual("E_SINGULAR", content["diagnostics"][0]["code"])
