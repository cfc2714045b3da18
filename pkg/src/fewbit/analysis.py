"""Bit Activation Maps, frame scores and bit-space word neighbours."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.utils.validation import check_is_fitted

from ._pgm import write_pgm
from .diffcore import Tensor, precision
from .featcomp import to_signs
from .report import Report, export_report, load_report  # noqa: F401  (re-exported)
from .tasks import N_FRAMES
from .validation import check_bits

UPSAMPLE = 4
NEIGHBOR_COLUMNS = ("word", "support", "rank", "neighbor", "distance")


@dataclass
class BAMap:
    maps: np.ndarray          # (T, 4, 4) signed average
    bits: np.ndarray          # (N,) uint8
    per_bit: np.ndarray       # (N, T, 4, 4) rectified per-bit maps

    @property
    def n_bits(self) -> int:
        return int(self.bits.size)

    def upsampled(self, factor: int = UPSAMPLE) -> np.ndarray:
        """Nearest-neighbour upsampling to the input frame grid (T, 16, 16)."""
        return self.maps.repeat(factor, axis=1).repeat(factor, axis=2)

    def export(self, directory, stem: str = "bam") -> list[Path]:
        """One PGM per frame (shared symmetric scale) plus a JSON of raw values."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        up = self.upsampled()
        peak = float(np.abs(up).max()) or 1.0
        paths = []
        for t, frame in enumerate(up):
            path = directory / f"{stem}_frame{t}.pgm"
            write_pgm(path, frame, -peak, peak)
            paths.append(path)
        raw = directory / f"{stem}.json"
        with open(raw, "w", encoding="utf-8", newline="\n") as fh:
            json.dump({"bits": self.bits.tolist(), "maps": self.maps.tolist(),
                       "frame_scores": bam_frame_scores(self).tolist()}, fh)
            fh.write("\n")
        paths.append(raw)
        return paths


def _bit_jacobian(featcomp, x: np.ndarray) -> np.ndarray:
    """d a'_i / d x for every bit i, in eval mode; shape (N,) + x.shape."""
    n = featcomp.n_bits
    xs = Tensor(np.repeat(x[None], n, axis=0), requires_grad=True)
    was = featcomp.training
    featcomp.eval()
    try:
        a = featcomp.activate(featcomp.encode(xs))
        a.backward(np.eye(n, dtype=a.dtype))
    finally:
        featcomp.train(was)
    return xs.grad


def bam(model, video, x_bin) -> BAMap:
    """Signed per-bit Grad-CAM over the extractor's last activation map.

    For bit i the channel weights are the per-frame spatial mean of the
    gradient of its tanh unit; the rectified map is signed by the stored
    bit (-1 for zeros) and the signed maps are averaged over bits.  Only
    the model, the clip and its code are consumed.
    """
    check_is_fitted(model, "performer_")
    if model.featcomp_ is None or model.extractor_ is None:
        raise ValueError("BAM needs a model with a frame extractor and a bottleneck")
    fc = model.featcomp_
    bits = check_bits(x_bin, fc.n_bits)[0]
    video = np.asarray(video)
    if video.shape != (N_FRAMES,) + video.shape[-2:]:
        raise ValueError(f"expected one clip of shape (T, H, W), got {video.shape}")
    with precision("float64"):
        model.extractor_.eval()
        A = model.extractor_(video[None].astype(np.float64)).data[0]      # (T, 4, 4, K)
        grads = _bit_jacobian(fc, A)                                       # (N, T, 4, 4, K)
    alpha = grads.mean(axis=(2, 3))                                        # (N, T, K)
    cams = np.maximum(np.einsum("ntk,thwk->nthw", alpha, A), 0.0)
    signs = to_signs(bits).astype(np.float64)
    maps = (signs[:, None, None, None] * cams).mean(axis=0)
    return BAMap(maps, bits, cams)


def bam_batch(model, videos) -> list[BAMap]:
    codes = model.transform(videos)
    return [bam(model, v, c) for v, c in zip(videos, codes)]


def bam_frame_scores(b: BAMap) -> np.ndarray:
    """Spatial mean per frame, length T."""
    return b.maps.mean(axis=(1, 2))


def box_mass_fraction(b: BAMap, box_mask) -> float:
    """Share of the positive upsampled BAM mass lying inside ``box_mask`` (T, 16, 16)."""
    pos = np.maximum(b.upsampled(), 0.0)
    total = pos.sum()
    return float(pos[np.asarray(box_mask, dtype=bool)].sum() / total) if total > 0 else 0.0


# -- word similarity ----------------------------------------------------------------

def tokens(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


@dataclass
class WordFeature:
    word: str
    mean: np.ndarray
    support: int


def word_features(qa_samples, codes: dict) -> dict[str, WordFeature]:
    """Mean code of the videos whose QA pairs mention each word.

    ``qa_samples`` yields ``(video_id, question, answer)``; ``codes`` maps
    video id to its stored bits.  A video counts once per word.
    """
    support: dict[str, set] = {}
    for vid, question, answer in qa_samples:
        for word in tokens(f"{question} {answer}"):
            support.setdefault(word, set()).add(int(vid))
    out = {}
    for word in sorted(support):
        vids = sorted(support[word])
        mat = np.stack([np.asarray(codes[v], dtype=np.float64) for v in vids])
        out[word] = WordFeature(word, mat.mean(axis=0), len(vids))
    return out


def word_similarity(qa_samples, codes: dict, top_k: int = 7) -> Report:
    """Top-k Euclidean neighbours per word in mean-code space; ties broken by word."""
    feats = word_features(qa_samples, codes)
    words = sorted(feats)
    rep = Report(NEIGHBOR_COLUMNS, meta={"top_k": int(top_k)})
    for w in words:
        dists = [(float(np.linalg.norm(feats[w].mean - feats[o].mean)), o) for o in words if o != w]
        dists.sort()
        for rank, (d, o) in enumerate(dists[:top_k], start=1):
            rep.add(word=w, support=feats[w].support, rank=rank, neighbor=o, distance=round(d, 12))
    return rep


def neighbor_table(rep: Report) -> dict[str, list[str]]:
    table: dict[str, list[str]] = {}
    for row in rep.rows:
        table.setdefault(row["word"], []).append(row["neighbor"])
    return table


def format_neighbors(rep: Report) -> str:
    """Plain-text listing: ``word: n1, n2, ...``."""
    return "\n".join(f"{w}: {', '.join(ns)}" for w, ns in neighbor_table(rep).items()) + "\n"
