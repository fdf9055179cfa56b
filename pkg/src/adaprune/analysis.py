"""Pruning-decision logs and the channel-category / per-sample analyses."""
import csv
import enum
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, CoverageError, MissingFileError

LOG_MAGIC = b"ADAPRDL\0"
LOG_VERSION = 1
_LOG_HEADER = struct.Struct("<8sHI")


class ChannelCategory(enum.IntEnum):
    NEVER_PRUNED = 0
    SAMPLE_DEPENDENT = 1
    ALWAYS_PRUNED = 2


class DecisionLog:
    """Per-(sample, layer) binary keep/prune vectors.

    Records arrive in batches via :meth:`record`; :meth:`matrix` returns the
    ``[N, C]`` bool array of a layer with rows in ascending sample-id order.
    """

    def __init__(self, layer_channels=None, split="", checkpoint_hash=""):
        self.layer_channels = dict(layer_channels or {})
        self.split = split
        self.checkpoint_hash = checkpoint_hash
        self._ids = {}
        self._bits = {}

    def record(self, layer_id, sample_ids, bits):
        bits = np.asarray(bits, dtype=bool)
        sample_ids = np.asarray(sample_ids, dtype=np.int64)
        if bits.ndim != 2 or bits.shape[0] != sample_ids.shape[0]:
            raise CoverageError(f"layer {layer_id}: {bits.shape} decisions for {sample_ids.shape[0]} samples")
        width = self.layer_channels.setdefault(layer_id, bits.shape[1])
        if bits.shape[1] != width:
            raise CoverageError(f"layer {layer_id}: bit vector length {bits.shape[1]} != {width}")
        self._ids.setdefault(layer_id, []).append(sample_ids)
        self._bits.setdefault(layer_id, []).append(bits)

    def records(self):
        """Yield ``(sample_id, layer_id, bits)`` in insertion order."""
        for lid in self._ids:
            for ids, bits in zip(self._ids[lid], self._bits[lid]):
                for sid, row in zip(ids, bits):
                    yield int(sid), lid, row

    @property
    def layer_ids(self):
        return sorted(self.layer_channels)

    def sample_ids(self, layer_id=None):
        lid = self.layer_ids[0] if layer_id is None else layer_id
        if lid not in self._ids:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(self._ids[lid]))

    def validate(self):
        """Raise CoverageError unless every layer covers the same sample set once."""
        if not self.layer_channels:
            raise CoverageError("decision log is empty")
        reference = None
        for lid in self.layer_ids:
            if lid not in self._ids:
                raise CoverageError(f"decision log has no records for layer {lid}")
            ids = self.sample_ids(lid)
            if np.unique(ids).size != ids.size:
                raise CoverageError(f"layer {lid}: duplicate sample ids")
            if reference is None:
                reference = ids
            elif not np.array_equal(ids, reference):
                missing = np.setdiff1d(np.union1d(ids, reference), np.intersect1d(ids, reference))
                raise CoverageError(f"layer {lid}: sample coverage differs, e.g. sample {int(missing[0])}")
        return reference

    def matrix(self, layer_id):
        ids = np.concatenate(self._ids[layer_id])
        bits = np.concatenate(self._bits[layer_id])
        return bits[np.argsort(ids, kind="stable")]

    def __len__(self):
        return int(self.sample_ids().size) if self.layer_channels else 0

    # ---------------------------------------------------------------- file io

    def save(self, path):
        ids = self.validate()
        meta = {
            "split": self.split,
            "checkpoint_hash": self.checkpoint_hash,
            "num_samples": int(ids.size),
            "layers": [{"layer_id": lid, "channels": self.layer_channels[lid]} for lid in self.layer_ids],
        }
        blob = json.dumps(meta).encode("utf-8")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(_LOG_HEADER.pack(LOG_MAGIC, LOG_VERSION, len(blob)))
            f.write(blob)
            f.write(ids.astype("<i8").tobytes())
            for lid in self.layer_ids:
                f.write(np.packbits(self.matrix(lid), axis=1).tobytes())
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"decision log not found: {path}")
        data = path.read_bytes()
        if len(data) < _LOG_HEADER.size:
            raise CorruptFileError(f"{path}: truncated header")
        magic, version, mlen = _LOG_HEADER.unpack_from(data)
        if magic != LOG_MAGIC or version != LOG_VERSION:
            raise CorruptFileError(f"{path}: not a version-{LOG_VERSION} decision log")
        pos = _LOG_HEADER.size
        meta = json.loads(data[pos : pos + mlen].decode("utf-8"))
        pos += mlen
        n = meta["num_samples"]
        ids = np.frombuffer(data[pos : pos + 8 * n], dtype="<i8").astype(np.int64)
        pos += 8 * n
        log = cls(split=meta["split"], checkpoint_hash=meta["checkpoint_hash"])
        for layer in meta["layers"]:
            c = layer["channels"]
            nbytes = (c + 7) // 8
            chunk = data[pos : pos + n * nbytes]
            if len(chunk) != n * nbytes:
                raise CorruptFileError(f"{path}: layer {layer['layer_id']} payload truncated")
            packed = np.frombuffer(chunk, dtype=np.uint8).reshape(n, nbytes)
            log.record(layer["layer_id"], ids, np.unpackbits(packed, axis=1, count=c).astype(bool))
            pos += n * nbytes
        return log

    def export_csv(self, path):
        self.validate()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "layer_id", "decisions"])
            ids = self.sample_ids()
            for lid in self.layer_ids:
                for sid, row in zip(ids, self.matrix(lid)):
                    w.writerow([int(sid), lid, "".join("1" if v else "0" for v in row)])
        return path


@dataclass
class DecisionAnalysis:
    categories: dict
    category_counts: dict
    active_counts: dict
    histograms: dict
    num_samples: int

    def write_csv(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "channel_categories.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer_id", "channels", "never_pruned", "sample_dependent", "always_pruned"])
            for lid, counts in self.category_counts.items():
                w.writerow([lid, len(self.categories[lid]), *counts])
        with open(out_dir / "active_channel_histogram.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer_id", "active_channels", "num_samples"])
            for lid, (values, counts) in self.histograms.items():
                for v, c in zip(values, counts):
                    w.writerow([lid, int(v), int(c)])
        return out_dir


def analyze_decisions(log, layers=None):
    """Classify each (layer, channel) and histogram per-sample active counts.

    ``layers`` limits the histograms to the given layer ids (all by default).
    """
    ids = log.validate()
    categories, counts, active, hists = {}, {}, {}, {}
    for lid in log.layer_ids:
        m = log.matrix(lid)
        kept = m.sum(axis=0)
        cat = np.full(m.shape[1], ChannelCategory.SAMPLE_DEPENDENT, dtype=np.int64)
        cat[kept == m.shape[0]] = ChannelCategory.NEVER_PRUNED
        cat[kept == 0] = ChannelCategory.ALWAYS_PRUNED
        categories[lid] = cat
        counts[lid] = tuple(int((cat == c).sum()) for c in ChannelCategory)
        per_sample = m.sum(axis=1)
        active[lid] = per_sample
        if layers is None or lid in layers:
            hists[lid] = np.unique(per_sample, return_counts=True)
    return DecisionAnalysis(categories, counts, active, hists, int(ids.size))
