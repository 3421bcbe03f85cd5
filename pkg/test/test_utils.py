# Test various utility functions

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

import hashlib

import pytest

from rfit.utils import THREADS_ENV, atomic_write, file_digest, thread_count


def test_thread_count_from_request(monkeypatch):
    """An explicit request wins over the environment"""
    monkeypatch.setenv(THREADS_ENV, "8")
    assert thread_count(3) == 3
    with pytest.raises(ValueError):
        thread_count(0)


def test_thread_count_from_environment(monkeypatch):
    """The environment supplies the default, falling back to one"""
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert thread_count() == 1
    monkeypatch.setenv(THREADS_ENV, "4")
    assert thread_count() == 4
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ValueError):
        thread_count()


def test_atomic_write(tmp_path):
    """Text and bytes land in place with no temporary files left behind"""
    target = tmp_path / "out" / "data.txt"
    atomic_write(target, "a,b\n1,2\n")
    assert target.read_text(encoding="utf-8") == "a,b\n1,2\n"
    atomic_write(target, b"\x00\x01")
    assert target.read_bytes() == b"\x00\x01"
    assert [p.name for p in target.parent.iterdir()] == ["data.txt"]


def test_file_digest(tmp_path):
    """Digests are sha256 of the file contents"""
    target = tmp_path / "blob"
    target.write_bytes(b"rfit" * 100000)
    assert file_digest(target) == hashlib.sha256(b"rfit" * 100000).hexdigest()
