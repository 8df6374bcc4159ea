import numpy as np

from resdistill.corpus import (CorpusManifest, DegradationSpec, ImagePair, ManifestEntry,
                               degrade, make_clean_image)
from resdistill.imageops import quantize8
from resdistill.seeding import derive_seed, rng_for


def memory_corpus(n: int, h: int, w: int, seed: int):
    """In-memory clean corpus: a manifest plus an id -> image cache (no disk I/O)."""
    images = {}
    entries = []
    for i in range(n):
        eid = f"img{i:05d}"
        images[eid] = make_clean_image(rng_for(seed, "clean", i), h, w)
        entries.append(ManifestEntry(
            id=eid, lq_path="", hq_path="", degradation=DegradationSpec("none", {}),
            width=w, height=h, seed=0,
        ))
    return CorpusManifest(entries=entries, seed=seed), images


def degraded_memory_corpus(n: int, h: int, w: int, seed: int, spec=None, tag: str = "img"):
    """Paired in-memory corpus on the 8-bit grid.

    Returns (manifest, pairs, cache): ImagePair list plus an id -> (lq, hq)
    cache usable by the trainer. The LQ is exactly reproducible from
    (hq, entry.degradation, entry.seed).
    """
    if spec is None:
        spec = DegradationSpec("noise", {"sigma": 25.0})
    entries, pairs, cache = [], [], {}
    for i in range(n):
        eid = f"{tag}{i:05d}"
        hq = quantize8(make_clean_image(rng_for(seed, tag, "clean", i), h, w))
        ds = derive_seed(seed, tag, "degrade", i)
        lq = quantize8(degrade(hq, spec, ds))
        entries.append(ManifestEntry(id=eid, lq_path="", hq_path="", degradation=spec,
                                     width=w, height=h, seed=ds))
        pairs.append(ImagePair(id=eid, lq=lq, hq=hq, degradation=spec, seed=ds))
        cache[eid] = (lq, hq)
    return CorpusManifest(entries=entries, seed=seed), pairs, cache


def constant_corpus(n: int, h: int, w: int, value: float = 0.5):
    """All-identical constant images; degenerate for scoring."""
    images = {}
    entries = []
    for i in range(n):
        eid = f"img{i:05d}"
        images[eid] = np.full((h, w, 3), value)
        entries.append(ManifestEntry(
            id=eid, lq_path="", hq_path="", degradation=DegradationSpec("none", {}),
            width=w, height=h, seed=0,
        ))
    return CorpusManifest(entries=entries, seed=0), images
