import json

import numpy as np
import pytest
from PIL import Image

from demem.errors import RetrievalError
from demem.retrieval import (
    FeatureHashEmbedder,
    LocalDirectorySource,
    PexelsSource,
    UnsplashSource,
    fetch_candidates,
)


def write_image(path, rng, size=(48, 48)):
    arr = (rng.random((size[1], size[0])) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
    return arr


@pytest.fixture
def image_dir(tmp_path, rng):
    for i in range(5):
        write_image(tmp_path / f"img_{i}.png", rng)
    meta = {
        "img_0.png": {"upload_year": 2021},
        "img_1.png": {"upload_year": 2025},
        "img_2.png": {"upload_year": 2023},
        "img_3.png": {"upload_year": 2024},
        "img_4.png": {"upload_year": 2022},
    }
    (tmp_path / "metadata.json").write_text(json.dumps(meta))
    return tmp_path


class TestEmbedder:
    def test_image_embedding_is_unit_and_deterministic(self, rng):
        emb = FeatureHashEmbedder()
        img = rng.random((40, 40))
        v1 = emb.embed_image(img)
        v2 = FeatureHashEmbedder().embed_image(img)
        assert np.linalg.norm(v1) == pytest.approx(1.0)
        np.testing.assert_array_equal(v1, v2)

    def test_constant_image_gets_fixed_basis(self):
        emb = FeatureHashEmbedder()
        v = emb.embed_image(np.full((40, 40), 9.0))
        expected = np.zeros(emb.dim)
        expected[0] = 1.0
        np.testing.assert_array_equal(v, expected)

    def test_word_embedding_unit_and_case_insensitive(self):
        emb = FeatureHashEmbedder()
        assert np.linalg.norm(emb.embed_word("hippo")) == pytest.approx(1.0)
        np.testing.assert_array_equal(emb.embed_word("Hippo"), emb.embed_word("hippo"))
        assert not np.array_equal(emb.embed_word("hippo"), emb.embed_word("rug"))


class TestLocalSource:
    def test_fetch_computes_hashes_and_years(self, image_dir):
        source = LocalDirectorySource(directory=image_dir)
        candidates = source.fetch("anything", 10, FeatureHashEmbedder())
        assert len(candidates) == 5
        assert {c.id for c in candidates} == {f"img_{i}.png" for i in range(5)}
        years = {c.id: c.upload_year for c in candidates}
        assert years["img_1.png"] == 2025
        for c in candidates:
            assert np.linalg.norm(c.embedding) == pytest.approx(1.0)
            assert isinstance(c.phash, int)

    def test_missing_directory_errors(self, tmp_path):
        source = LocalDirectorySource(directory=tmp_path / "nope")
        with pytest.raises(RetrievalError):
            source.fetch("x", 5, FeatureHashEmbedder())


class TestFetchCandidates:
    def test_min_year_preference_orders_recent_first(self, image_dir):
        source = LocalDirectorySource(directory=image_dir)
        candidates = fetch_candidates("q", [source], min_year=2024, limit=10)
        preferred = [c.id for c in candidates if c.upload_year >= 2024]
        assert [c.id for c in candidates[: len(preferred)]] == preferred
        assert set(preferred) == {"img_1.png", "img_3.png"}
        assert len(candidates) == 5  # older ones deprioritized, not dropped

    def test_limit_truncates(self, image_dir):
        source = LocalDirectorySource(directory=image_dir)
        assert len(fetch_candidates("q", [source], limit=3)) == 3

    def test_soft_failure_of_one_source(self, image_dir):
        bad = LocalDirectorySource(directory=image_dir / "missing")
        good = LocalDirectorySource(directory=image_dir)
        candidates = fetch_candidates("q", [bad, good], limit=10)
        assert len(candidates) == 5

    def test_all_sources_failed_raises(self, tmp_path):
        bad = LocalDirectorySource(directory=tmp_path / "missing")
        with pytest.raises(RetrievalError):
            fetch_candidates("q", [bad, bad], limit=5)

    def test_requires_sources(self):
        with pytest.raises(ValueError):
            fetch_candidates("q", [], limit=5)


class FakeResponse:
    def __init__(self, payload=None, content=b""):
        self._payload = payload
        self.content = content

    def raise_for_status(self):
        return None

    def json(self):
        return self._payload


class FakeSession:
    """Canned responses keyed by URL; records every request made."""

    def __init__(self, search_payload, thumb_bytes):
        self.search_payload = search_payload
        self.thumb_bytes = thumb_bytes
        self.calls = []

    def get(self, url, timeout=None, **kwargs):
        self.calls.append((url, kwargs))
        if "thumb" in url:
            return FakeResponse(content=self.thumb_bytes)
        return FakeResponse(payload=self.search_payload)


def png_bytes(rng):
    import io

    arr = (rng.random((40, 40)) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


class TestHttpSources:
    def test_pexels_parses_photos(self, rng, monkeypatch):
        monkeypatch.setenv("PEXELS_API_KEY", "k")
        payload = {"photos": [{"id": 7, "src": {"small": "https://x/thumb7.png"}}]}
        session = FakeSession(payload, png_bytes(rng))
        source = PexelsSource(session=session)
        out = source.fetch("hippo", 5, FeatureHashEmbedder())
        assert [c.id for c in out] == ["pexels-7"]
        assert out[0].upload_year == 0  # search response carries no date
        params = session.calls[0][1]["params"]
        assert params == {"query": "hippo", "per_page": 5, "page": 1}

    def test_pexels_requires_key(self, monkeypatch):
        monkeypatch.delenv("PEXELS_API_KEY", raising=False)
        with pytest.raises(RetrievalError):
            PexelsSource(session=FakeSession({}, b"")).fetch("q", 5, FeatureHashEmbedder())

    def test_unsplash_parses_year(self, rng, monkeypatch):
        monkeypatch.setenv("UNSPLASH_ACCESS_KEY", "k")
        payload = {
            "results": [
                {"id": "abc", "urls": {"small": "https://x/thumb.png"}, "created_at": "2025-03-01T00:00:00Z"}
            ]
        }
        session = FakeSession(payload, png_bytes(rng))
        out = UnsplashSource(session=session).fetch("rug", 5, FeatureHashEmbedder())
        assert out[0].id == "unsplash-abc"
        assert out[0].upload_year == 2025

    def test_retries_then_fails_soft_in_fetch(self, rng, monkeypatch):
        monkeypatch.setenv("PEXELS_API_KEY", "k")

        class FailingSession:
            def __init__(self):
                self.calls = 0

            def get(self, url, timeout=None, **kwargs):
                self.calls += 1
                raise OSError("connection refused")

        session = FailingSession()
        monkeypatch.setattr("time.sleep", lambda s: None)
        source = PexelsSource(session=session)
        with pytest.raises(RetrievalError):
            source.fetch("q", 5, FeatureHashEmbedder())
        assert session.calls == 3  # first attempt + 2 retries
