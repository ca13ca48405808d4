"""Tests for file repositories"""

import json
import math

import numpy as np
import pandas as pd
import pytest

from ..tools.file_repos import BundleRepository, digest, dumps


@pytest.fixture
def bundle(tmp_path):
    """Bundle repository in a temporary output directory"""
    return BundleRepository(tmp_path / "out")


def test_dumps_is_canonical():
    """Test sorted keys, numpy scalars and a trailing newline"""
    text = dumps({"b": np.float64(0.5), "a": np.int64(3), "c": frozenset({"y", "x"})})

    assert text.endswith("\n")
    assert list(json.loads(text)) == ["a", "b", "c"]
    assert json.loads(text)["c"] == ["x", "y"]


def test_dumps_rejects_nan():
    """Test that NaN never reaches the bundle"""
    with pytest.raises(ValueError):
        dumps({"auc": math.nan})


def test_digest_ignores_key_order():
    """Test that the digest depends on content only"""
    assert digest({"a": 1, "b": 2}) == digest({"b": 2, "a": 1})
    assert digest({"a": 1}) != digest({"a": 2})


def test_bundle_writes_and_tracks_files(bundle):
    """Test that every written file is listed once"""
    bundle.write_json("tests/result.json", {"p": 0.01})
    bundle.write_csv("tables/rows.csv", [{"x": 1, "y": None}], ["x", "y"])
    bundle.write_frame("roc/alpha.csv", pd.DataFrame({"fpr": [0.0, 1.0], "tpr": [0.0, 1.0]}))
    bundle.write_text("report.txt", "done\n")
    bundle.write_json("tests/result.json", {"p": 0.02})

    assert bundle.files == ["tests/result.json", "tables/rows.csv", "roc/alpha.csv", "report.txt"]
    assert (bundle.out_dir / "tables" / "rows.csv").read_text() == "x,y\n1,\n"
    assert json.loads((bundle.out_dir / "tests" / "result.json").read_text()) == {"p": 0.02}


def test_manifest_round_trip(bundle):
    """Test that provenance entries survive writing and loading the manifest"""
    bundle.record("tables/roc_auc.csv", "alpha", "auc", {"scope": "alpha"}, np.float64(0.8))
    bundle.record("tables/roc_auc.csv", "beta", "auc", {"scope": "beta"}, None)
    bundle.write_manifest("abc123", 7, {"tbeval": "0.1.0"})

    manifest = BundleRepository.load_manifest(bundle.out_dir)

    assert manifest["config_hash"] == "abc123"
    assert manifest["seed"] == 7
    assert manifest["files"] == ["manifest.json"]
    assert manifest["provenance"][0] == {
        "output": "tables/roc_auc.csv",
        "key": "alpha",
        "operation": "auc",
        "params": {"scope": "alpha"},
        "value": 0.8,
    }
    assert manifest["provenance"][1]["value"] is None


def test_manifest_lists_every_bundle_file(bundle):
    """Test that the manifest names the earlier outputs and itself"""
    bundle.write_json("tests/result.json", {"p": 0.01})
    bundle.write_text("report.txt", "done\n")
    bundle.write_manifest("abc123", 7, {})

    manifest = BundleRepository.load_manifest(bundle.out_dir)

    assert manifest["files"] == ["manifest.json", "report.txt", "tests/result.json"]
    assert bundle.files == ["tests/result.json", "report.txt", "manifest.json"]
