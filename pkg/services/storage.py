import logging
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

from services.errors import StorageError

logger = logging.getLogger(__name__)


@contextmanager
def atomic_output(path: Path, mode: str = "wb") -> Iterator:
    """Open a temp file next to `path` and rename it into place on success.

    An interrupted write leaves the previous file (or nothing) behind, never a
    truncated artifact.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    except OSError as e:
        raise StorageError(f"Cannot create output directory ({e.strerror})", path) from e

    tmp_path = Path(tmp_name)
    try:
        with os.fdopen(fd, mode) as handle:
            yield handle
        os.replace(tmp_path, path)
    except OSError as e:
        tmp_path.unlink(missing_ok=True)
        raise StorageError(f"Failed writing file ({e.strerror})", path) from e
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise
    logger.debug(f"Wrote {path}")


def write_bytes_atomic(path: Path, payload: bytes) -> None:
    with atomic_output(path, "wb") as handle:
        handle.write(payload)


def write_text_atomic(path: Path, text: str) -> None:
    with atomic_output(path, "w") as handle:
        handle.write(text)


def read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as e:
        raise StorageError("File not found", path) from e
    except OSError as e:
        raise StorageError(f"Cannot read file ({e.strerror})", path) from e
