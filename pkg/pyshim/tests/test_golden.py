import hashlib
import json
from pathlib import Path

from procmem_pyshim.golden import emit_golden_vectors

CHECKED_IN = Path(__file__).resolve().parents[2] / "tests" / "golden"


def test_regeneration_is_byte_deterministic(tmp_path):
    first = tmp_path / "one"
    second = tmp_path / "two"
    emit_golden_vectors(first)
    emit_golden_vectors(second)
    files_a = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel


def test_regenerated_digests_match_checked_in(tmp_path):
    digests = emit_golden_vectors(tmp_path / "fresh")
    pinned = json.loads((CHECKED_IN / "digests.json").read_text())["sha256"]
    assert digests == pinned


def test_checked_in_copies_are_intact():
    pinned = json.loads((CHECKED_IN / "digests.json").read_text())["sha256"]
    for rel, expected in pinned.items():
        blob = (CHECKED_IN / rel).read_bytes()
        assert hashlib.sha256(blob).hexdigest() == expected, rel
