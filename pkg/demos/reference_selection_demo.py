#!/usr/bin/env python3
"""Walkthrough: scoring reference candidates fully offline.

Candidates come from a local directory (synthesized here), embeddings from
the deterministic pixel-statistics embedder, novelty from a flat exact
index, and uniqueness from 64-bit perceptual hashes. The winner maximizes
0.3 * alignment + 0.4 * novelty + 0.3 * uniqueness.
"""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from demem import (
    FeatureHashEmbedder,
    LocalDirectorySource,
    build_index,
    composite_select,
    fetch_candidates,
    phash64,
)

rng = np.random.default_rng(7)
workdir = Path(tempfile.mkdtemp(prefix="demem_demo_"))

print(f"synthesizing 6 candidate images in {workdir}")
for i in range(6):
    arr = (rng.random((48, 48)) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(workdir / f"cand_{i}.png")

embedder = FeatureHashEmbedder()
candidates = fetch_candidates(
    "texture", [LocalDirectorySource(directory=workdir)], min_year=2024, limit=10,
    embedder=embedder,
)
print(f"retrieved {len(candidates)} candidates (min-year preference applied)")

# stand-in training corpus: embeddings and hashes of other random images
corpus_rows, corpus_hashes = [], []
for _ in range(50):
    img = rng.random((48, 48)) * 255
    corpus_rows.append(embedder.embed_image(img))
    corpus_hashes.append(phash64(img))
index = build_index(corpus_rows)

query_vec = embedder.embed_word("texture")
winner, scores = composite_select(candidates, query_vec, index, corpus_hashes)

print()
print(f"{'candidate':<14} {'h1 align':>9} {'h2 novel':>9} {'h3 unique':>10} {'total':>8}")
for s in scores:
    marker = "  <- selected" if s.candidate_id == winner.id else ""
    print(f"{s.candidate_id:<14} {s.h1:>9.4f} {s.h2:>9.4f} {s.h3:>10.4f} {s.total:>8.4f}{marker}")
print()
print("h2 rewards distance from the indexed corpus, h3 distance from its hashes;")
print("either shielding alone can be overridden by the weighted sum, which is the point")
