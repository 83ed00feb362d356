"""Scan server-bound bytes for anything that identifies tasks, labels or samples.

Every string is searched for in the structured part of each message (frame
header plus the JSON header of the weight payload). The raw float32 tensor
bytes are only searched for strings of at least ``MIN_RAW`` bytes: shorter
ones, such as ``DR``, turn up in random weights by chance.
"""

import json

from fedmim import checkpoint, fed

MIN_RAW = 6


def sentinel_strings(manifests):
    out = set()
    for m in manifests:
        for spec in m.specs.values():
            out.update({spec.name, spec.kind})
        for r in m.records:
            out.add(r.id)
            if r.path:
                out.add(r.path)
    out.update({"label", "split", "train_images", ".fmimg", "mask_path", "out_of_network", "tint"})
    return sorted(out)


def structured_bytes(blob):
    """Frame header and weight-payload JSON header of one message."""
    payload = blob[fed._MSG_HEADER.size:-4]
    _, _, hlen = checkpoint._PREFIX.unpack_from(payload)
    start = checkpoint._PREFIX.size
    return blob[:fed._MSG_HEADER.size] + payload[start:start + hlen]


def header_keys(blob):
    payload = blob[fed._MSG_HEADER.size:-4]
    start = checkpoint._PREFIX.size
    _, _, hlen = checkpoint._PREFIX.unpack_from(payload)
    return set(json.loads(payload[start:start + hlen]))


def scan_for_sentinels(blobs, manifests):
    sentinels = [s.encode() for s in sentinel_strings(manifests)]
    hits = []
    for i, blob in enumerate(blobs):
        meta = structured_bytes(blob)
        for s in sentinels:
            if s in meta or (len(s) >= MIN_RAW and s in blob):
                hits.append((i, s))
    return hits
