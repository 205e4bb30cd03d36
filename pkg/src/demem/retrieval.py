"""Candidate retrieval from local directories and public image-search APIs.

Everything a candidate needs (hash, embedding) is computed locally, so the
offline path works with no network and no neural encoders: the default
embedder projects coarse pixel statistics through a fixed random matrix.
HTTP sources soft-fail individually; retrieval only errors out when every
configured source failed and nothing was collected. Candidates uploaded
before ``min_year`` are deprioritized (stably sorted after newer ones), not
dropped.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import RetrievalError
from .phash import area_resize, load_image_gray, phash64, to_grayscale
from .selector import Candidate
from .vecindex import normalize

log = logging.getLogger(__name__)

DEFAULT_MIN_YEAR = 2024
DEFAULT_EMBED_DIM = 64
HTTP_TIMEOUT_S = 10.0
HTTP_RETRIES = 2  # retries after the first attempt

PEXELS_SEARCH_URL = "https://api.pexels.com/v1/search"
UNSPLASH_SEARCH_URL = "https://api.unsplash.com/search/photos"

_PROJECTION_SEED = 0x5EED_CAFE
_IMAGE_GRID = 16


class FeatureHashEmbedder:
    """Deterministic pixel-statistics embedder (no networks, no downloads).

    Images: area-average to a 16x16 grid, z-score, project through a fixed
    seeded Gaussian matrix, L2-normalize. Words: a Gaussian vector seeded
    from the word's SHA-256, normalized. Stable across runs and platforms.
    """

    def __init__(self, dim: int = DEFAULT_EMBED_DIM):
        if dim < 1:
            raise ValueError(f"embedding dim must be >= 1, got {dim}")
        self.dim = dim
        rng = np.random.default_rng(_PROJECTION_SEED)
        self._projection = rng.standard_normal((dim, _IMAGE_GRID * _IMAGE_GRID))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        gray = to_grayscale(image)
        grid = area_resize(gray, (_IMAGE_GRID, _IMAGE_GRID)).reshape(-1)
        std = grid.std()
        if std <= 1e-12:
            out = np.zeros(self.dim)
            out[0] = 1.0  # constant image: fixed basis vector
            return out
        z = (grid - grid.mean()) / std
        return normalize(self._projection @ z)

    def embed_word(self, word: str) -> np.ndarray:
        digest = hashlib.sha256(word.strip().lower().encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return normalize(rng.standard_normal(self.dim))


@dataclass
class LocalDirectorySource:
    """Serve candidates from image files in a directory (query is ignored).

    Upload years come from an optional ``metadata.json`` mapping file names
    to ``{"upload_year": ...}``; files without metadata fall back to their
    modification-time year.
    """

    directory: str | Path
    name: str = "local"
    extensions: tuple[str, ...] = (".png", ".jpg", ".jpeg", ".bmp")

    def fetch(self, query: str, limit: int, embedder: FeatureHashEmbedder) -> list[Candidate]:
        directory = Path(self.directory)
        if not directory.is_dir():
            raise RetrievalError(f"{directory} is not a directory")
        meta = {}
        meta_path = directory / "metadata.json"
        if meta_path.is_file():
            import json

            meta = json.loads(meta_path.read_text())
        files = sorted(
            p for p in directory.iterdir() if p.suffix.lower() in self.extensions
        )
        out = []
        for path in files[:limit]:
            gray = load_image_gray(path)
            year = meta.get(path.name, {}).get("upload_year")
            if year is None:
                year = datetime.fromtimestamp(path.stat().st_mtime, tz=timezone.utc).year
            out.append(
                Candidate(
                    id=path.name,
                    embedding=embedder.embed_image(gray),
                    phash=phash64(gray),
                    source=self.name,
                    upload_year=int(year),
                )
            )
        return out


def _get_with_retries(session, url: str, **kwargs):
    last_exc: Exception | None = None
    for attempt in range(1 + HTTP_RETRIES):
        try:
            resp = session.get(url, timeout=HTTP_TIMEOUT_S, **kwargs)
            resp.raise_for_status()
            return resp
        except Exception as exc:  # noqa: BLE001 - per-source soft failure
            last_exc = exc
            if attempt < HTTP_RETRIES:
                time.sleep(0.5 * (attempt + 1))
    raise RetrievalError(f"request to {url} failed after {1 + HTTP_RETRIES} attempts: {last_exc}")


def _image_from_response(resp) -> np.ndarray:
    import io

    from PIL import Image

    with Image.open(io.BytesIO(resp.content)) as img:
        return np.asarray(img.convert("L"), dtype=np.float64)


@dataclass
class PexelsSource:
    """Pexels photo search. Requires the PEXELS_API_KEY env var.

    The search response carries no upload date, so candidates report year 0
    and sort behind dated ones under the min-year preference.
    """

    name: str = "pexels"
    session: object = field(default=None, repr=False)

    def fetch(self, query: str, limit: int, embedder: FeatureHashEmbedder) -> list[Candidate]:
        api_key = os.environ.get("PEXELS_API_KEY")
        if not api_key:
            raise RetrievalError("PEXELS_API_KEY is not set")
        session = self.session or _default_session()
        resp = _get_with_retries(
            session,
            PEXELS_SEARCH_URL,
            params={"query": query, "per_page": limit, "page": 1},
            headers={"Authorization": api_key},
        )
        out = []
        for photo in resp.json().get("photos", []):
            thumb = _get_with_retries(session, photo["src"]["small"])
            gray = _image_from_response(thumb)
            out.append(
                Candidate(
                    id=f"pexels-{photo['id']}",
                    embedding=embedder.embed_image(gray),
                    phash=phash64(gray),
                    source=self.name,
                    upload_year=0,
                )
            )
        return out


@dataclass
class UnsplashSource:
    """Unsplash photo search. Requires the UNSPLASH_ACCESS_KEY env var."""

    name: str = "unsplash"
    session: object = field(default=None, repr=False)

    def fetch(self, query: str, limit: int, embedder: FeatureHashEmbedder) -> list[Candidate]:
        access_key = os.environ.get("UNSPLASH_ACCESS_KEY")
        if not access_key:
            raise RetrievalError("UNSPLASH_ACCESS_KEY is not set")
        session = self.session or _default_session()
        resp = _get_with_retries(
            session,
            UNSPLASH_SEARCH_URL,
            params={"query": query, "per_page": limit, "page": 1},
            headers={"Authorization": f"Client-ID {access_key}"},
        )
        out = []
        for photo in resp.json().get("results", []):
            thumb = _get_with_retries(session, photo["urls"]["small"])
            gray = _image_from_response(thumb)
            created = str(photo.get("created_at", ""))
            year = int(created[:4]) if created[:4].isdigit() else 0
            out.append(
                Candidate(
                    id=f"unsplash-{photo['id']}",
                    embedding=embedder.embed_image(gray),
                    phash=phash64(gray),
                    source=self.name,
                    upload_year=year,
                )
            )
        return out


def _default_session():
    import requests

    return requests.Session()


def fetch_candidates(
    query: str,
    sources: list,
    min_year: int = DEFAULT_MIN_YEAR,
    limit: int = 10,
    embedder: FeatureHashEmbedder | None = None,
) -> list[Candidate]:
    """Collect candidates across sources with the min-year preference applied.

    Sources are tried in order and soft-fail individually with a warning;
    ``RetrievalError`` is raised only if every source failed and nothing was
    collected. Candidates with ``upload_year >= min_year`` sort (stably)
    before older or undated ones, then the list truncates to ``limit``.
    """
    if not sources:
        raise ValueError("at least one candidate source must be configured")
    if limit < 1:
        raise ValueError(f"limit must be >= 1, got {limit}")
    embedder = embedder or FeatureHashEmbedder()
    collected: list[Candidate] = []
    failures = 0
    for source in sources:
        try:
            collected.extend(source.fetch(query, limit, embedder))
        except Exception as exc:  # noqa: BLE001 - per-source isolation
            failures += 1
            log.warning("candidate source %r failed: %s", getattr(source, "name", source), exc)
    if not collected and failures == len(sources):
        raise RetrievalError(f"all {failures} candidate sources failed")
    preferred = sorted(collected, key=lambda c: 0 if c.upload_year >= min_year else 1)
    return preferred[:limit]
