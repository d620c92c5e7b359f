"""Atomic writes and the shared "text header + binary payload" file layout."""

from __future__ import annotations

import hashlib
import os
import tempfile

from .errors import CorruptionError, InputError

HEADER_END = "END"


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_blob(path, header_lines, payload: bytes) -> None:
    for line in header_lines:
        if "\n" in line or line == HEADER_END:
            raise InputError(f"illegal header line {line!r}")
    head = "\n".join([*header_lines, HEADER_END]) + "\n"
    atomic_write_bytes(path, head.encode("utf-8") + payload)


def read_blob(path, magic: str) -> tuple[list[str], bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    marker = ("\n" + HEADER_END + "\n").encode()
    cut = data.find(marker)
    if cut < 0:
        raise CorruptionError(f"{path}: header terminator not found")
    try:
        lines = data[:cut].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise CorruptionError(f"{path}: header is not valid UTF-8") from exc
    if not lines or lines[0] != magic:
        raise CorruptionError(f"{path}: expected a {magic} file")
    return lines[1:], data[cut + len(marker):]


def parse_fields(lines) -> dict[str, str]:
    out = {}
    for line in lines:
        key, sep, value = line.partition(": ")
        if not sep:
            raise CorruptionError(f"malformed header line {line!r}")
        out[key] = value
    return out


def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way ``git hash-object`` does."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return git_blob_hash(fh.read())
