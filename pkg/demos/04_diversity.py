"""
How varied are the dialogues?
=============================

Sessions generated from the same record share a skeleton but differ in the
background story, the doctor's style and the question order. This script
measures how much of that variation survives in the text: keyword overlap
between sessions of one record, entropy and hapax share of the whole token
stream, and the spread of hashed bag-of-words vectors.
"""

import tempfile
from pathlib import Path

import numpy as np

from psydiag import GenerationJob, generate_dataset, load_emrs
from psydiag.cli import shipped_sample_emrs
from psydiag.metrics import HashingEmbedder, corpus_diversity, extract_keywords, read_corpus

emrs = load_emrs(shipped_sample_emrs())[:2]
out = Path(tempfile.mkdtemp(prefix="psydiag-div-"))
corpus = read_corpus(generate_dataset(GenerationJob(emrs, out, strategies=("random",))).corpus_path)

for s in corpus[:3]:
    print(s.session_id, sorted(extract_keywords(s, 8)))

d = corpus_diversity(corpus, k=10)
print(f"\nintra-record keyword diversity: {d.intra_emr:.3f}")
print(f"normalized token entropy:       {d.normalized_entropy:.3f}")
print(f"hapax proportion:               {d.hapax:.3f}")
print(f"semantic diversity:             {d.semantic:.3f}")

# The embedder is plain feature hashing, so similar sessions land on similar vectors.
vecs = HashingEmbedder(dim=256)([" ".join(t.text for t in s.turns) for s in corpus])
unit = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
sims = unit @ unit.T
print("\ncosine similarity of the first four sessions:")
print(np.array2string(sims[:4, :4], precision=3))
