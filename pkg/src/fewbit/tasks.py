"""Synthetic data and reference networks.

* A toy VideoQA family: 8-frame 16x16 clips holding one moving shape, asked
  either "shape?" or "motion?".
* A 10-identity face stand-in used by the inversion attack.

Also the binary video container (TOYV) and the tab-separated QA records.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from ._rng import child_rng
from .diffcore import Conv2d, Dense, Module, Tensor, functional as F
from .featcomp import FeatComp, FeatCompConfig

SHAPES = ("square", "circle", "triangle", "cross")
MOTIONS = ("static", "left", "right", "down", "bounce")
ANSWERS = SHAPES + MOTIONS
QUESTIONS = ("shape?", "motion?")
SHAPE_Q, MOTION_Q = 0, 1
VALID_ANSWERS = {SHAPE_Q: tuple(range(4)), MOTION_Q: tuple(range(4, 9))}

N_FRAMES, FRAME_SIZE, OBJECT_SIZE = 8, 16, 5
FEATURE_DIMS = (N_FRAMES, 4, 4, 16)
BOUNCE_SPEED = 3

_TEMPLATES = {
    "square": ["#####", "#...#", "#...#", "#...#", "#####"],
    "circle": [".###.", "#####", "#####", "#####", ".###."],
    "triangle": ["..#..", ".###.", ".###.", "#####", "#####"],
    "cross": ["..#..", "..#..", "#####", "..#..", "..#.."],
}
SHAPE_MASKS = np.stack([
    np.array([[c == "#" for c in row] for row in _TEMPLATES[name]], dtype=np.float32) for name in SHAPES
])


@dataclass(frozen=True)
class TaskSpec:
    name: str
    question_types: tuple

    @property
    def chance_accuracy(self) -> float:
        # equal question mix across the admissible types
        return float(np.mean([1.0 / len(VALID_ANSWERS[q]) for q in self.question_types]))


TASKS = {
    "shape": TaskSpec("shape", (SHAPE_Q,)),
    "motion": TaskSpec("motion", (MOTION_Q,)),
    "all": TaskSpec("all", (SHAPE_Q, MOTION_Q)),
}


def get_task(task) -> TaskSpec:
    if isinstance(task, TaskSpec):
        return task
    try:
        return TASKS[task]
    except KeyError:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASKS)}") from None


# -- toy videos -------------------------------------------------------------

@dataclass
class ToyVideo:
    id: int
    frames: np.ndarray
    shape: int
    motion: int
    noise: float
    boxes: np.ndarray

    @property
    def attributes(self) -> dict:
        return {"shape": SHAPES[self.shape], "motion": MOTIONS[self.motion]}


@dataclass
class VideoSet:
    """Column-oriented batch of toy videos.

    ``boxes[i, t] = (x0, y0)`` is the top-left corner of the 5x5 object in
    frame ``t``, or ``(-1, -1)`` when the object is absent.
    """

    ids: np.ndarray
    frames: np.ndarray
    shapes: np.ndarray
    motions: np.ndarray
    boxes: np.ndarray
    noise: float = 0.0

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> ToyVideo:
        return ToyVideo(int(self.ids[i]), self.frames[i], int(self.shapes[i]), int(self.motions[i]),
                        self.noise, self.boxes[i])

    def subset(self, index) -> "VideoSet":
        index = np.asarray(index)
        return VideoSet(self.ids[index], self.frames[index], self.shapes[index], self.motions[index],
                        self.boxes[index], self.noise)

    def box_mask(self) -> np.ndarray:
        """(n, T, H, W) boolean mask of each frame's object bounding box."""
        n, T = self.boxes.shape[:2]
        mask = np.zeros((n, T, FRAME_SIZE, FRAME_SIZE), dtype=bool)
        for i in range(n):
            for t in range(T):
                x0, y0 = self.boxes[i, t]
                if x0 >= 0:
                    mask[i, t, y0:y0 + OBJECT_SIZE, x0:x0 + OBJECT_SIZE] = True
        return mask


def _trajectory(motion: int, rng: np.random.Generator) -> np.ndarray:
    top = FRAME_SIZE - OBJECT_SIZE
    span = N_FRAMES - 1
    x0, y0 = int(rng.integers(0, top + 1)), int(rng.integers(0, top + 1))
    t = np.arange(N_FRAMES)
    name = MOTIONS[motion]
    if name == "static":
        xs, ys = np.full(N_FRAMES, x0), np.full(N_FRAMES, y0)
    elif name == "left":
        x0 = int(rng.integers(span, top + 1))
        xs, ys = x0 - t, np.full(N_FRAMES, y0)
    elif name == "right":
        x0 = int(rng.integers(0, top - span + 1))
        xs, ys = x0 + t, np.full(N_FRAMES, y0)
    elif name == "down":
        y0 = int(rng.integers(0, top - span + 1))
        xs, ys = np.full(N_FRAMES, x0), y0 + t
    else:  # bounce: vertical, starts upward, reflects off the borders
        ys = np.empty(N_FRAMES, dtype=np.int64)
        y, dy = y0, -BOUNCE_SPEED
        for k in range(N_FRAMES):
            ys[k] = y
            y += dy
            if y < 0:
                y, dy = -y, -dy
            elif y > top:
                y, dy = 2 * top - y, -dy
        xs = np.full(N_FRAMES, x0)
    return np.stack([xs, ys], axis=1).astype(np.int8)


def gen_toy_videos(seed: int, count: int, noise: float = 0.1, onset: int = 0,
                   start_id: int = 0, balanced: bool = True, split: int = 0) -> VideoSet:
    """Deterministic toy clips with independent shape and motion attributes.

    ``balanced`` cycles through all shape x motion pairs in a shuffled
    order, so label frequencies are exact whenever ``count`` is a multiple
    of 20; otherwise both attributes are drawn uniformly at random.
    ``onset`` > 0 hides the object in frames ``[0, onset)``.  ``split``
    selects an independent stream for the same seed (train/eval sets).
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 0 <= onset < N_FRAMES:
        raise ValueError(f"onset must be in [0, {N_FRAMES}), got {onset}")
    rng = child_rng(seed, "data", split) if split else child_rng(seed, "data")
    if balanced:
        pairs = rng.permutation(np.arange(count) % (len(SHAPES) * len(MOTIONS)))
        shapes, motions = pairs % len(SHAPES), pairs // len(SHAPES)
    else:
        shapes = rng.integers(0, len(SHAPES), size=count)
        motions = rng.integers(0, len(MOTIONS), size=count)
    boxes = np.stack([_trajectory(int(m), rng) for m in motions])
    boxes[:, :onset] = -1
    frames = np.zeros((count, N_FRAMES, FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
    for i in range(count):
        mask = SHAPE_MASKS[shapes[i]]
        for t in range(N_FRAMES):
            x0, y0 = boxes[i, t]
            if x0 >= 0:
                frames[i, t, y0:y0 + OBJECT_SIZE, x0:x0 + OBJECT_SIZE] = mask
    if noise > 0:
        frames += rng.normal(0.0, noise, size=frames.shape).astype(np.float32)
    np.clip(frames, 0.0, 1.0, out=frames)
    ids = np.arange(start_id, start_id + count, dtype=np.int64)
    return VideoSet(ids, frames, shapes.astype(np.int64), motions.astype(np.int64), boxes, float(noise))


@dataclass
class QASet:
    video_index: np.ndarray
    video_ids: np.ndarray
    questions: np.ndarray
    answers: np.ndarray

    def __len__(self) -> int:
        return len(self.answers)

    def records(self):
        for vid, q, a in zip(self.video_ids, self.questions, self.answers):
            yield int(vid), QUESTIONS[int(q)], ANSWERS[int(a)]


def gen_qa(videos: VideoSet, task="all", seed: int | None = None) -> QASet:
    """One QA per video per admissible question type; ``seed`` permutes row order."""
    if len(videos) == 0:
        raise ValueError("gen_qa needs at least one video")
    spec = get_task(task)
    index, questions, answers = [], [], []
    for i in range(len(videos)):
        for q in spec.question_types:
            index.append(i)
            questions.append(q)
            answers.append(int(videos.shapes[i]) if q == SHAPE_Q else 4 + int(videos.motions[i]))
    index = np.asarray(index)
    order = np.arange(len(index)) if seed is None else child_rng(seed, "shuffle", 7).permutation(len(index))
    index = index[order]
    return QASet(index, videos.ids[index], np.asarray(questions)[order], np.asarray(answers)[order])


def question_onehot(questions) -> np.ndarray:
    q = np.asarray(questions, dtype=np.int64)
    out = np.zeros((q.shape[0], len(QUESTIONS)))
    out[np.arange(q.shape[0]), q] = 1.0
    return out


def answer_mask(questions) -> np.ndarray:
    """(B, 9) boolean mask of answers admissible for each question."""
    q = np.asarray(questions, dtype=np.int64)
    mask = np.zeros((q.shape[0], len(ANSWERS)), dtype=bool)
    for qt, valid in VALID_ANSWERS.items():
        mask[np.ix_(q == qt, valid)] = True
    return mask


# -- containers ---------------------------------------------------------------

TOYV_MAGIC = b"TOYV"
TOYV_VERSION = 1


def dumps_videos(videos: VideoSet) -> bytes:
    """TOYV layout (little-endian)::

        magic b"TOYV" | version u16 | count u32 | T u16 | H u16 | W u16 | noise f32
        per video: id u64 | shape u8 | motion u8 | boxes T*(x i8, y i8) | frames T*H*W f32
    """
    n, T, H, W = videos.frames.shape
    buf = io.BytesIO()
    buf.write(TOYV_MAGIC)
    buf.write(struct.pack("<HIHHHf", TOYV_VERSION, n, T, H, W, videos.noise))
    for i in range(n):
        buf.write(struct.pack("<QBB", int(videos.ids[i]), int(videos.shapes[i]), int(videos.motions[i])))
        buf.write(videos.boxes[i].astype("<i1").tobytes())
        buf.write(videos.frames[i].astype("<f4").tobytes())
    return buf.getvalue()


def loads_videos(data: bytes) -> VideoSet:
    if data[:4] != TOYV_MAGIC:
        raise ValueError("bad magic: not a TOYV file")
    version, n, T, H, W, noise = struct.unpack_from("<HIHHHf", data, 4)
    if version != TOYV_VERSION:
        raise ValueError(f"unsupported TOYV version {version}")
    pos = 4 + struct.calcsize("<HIHHHf")
    record = 10 + 2 * T + 4 * T * H * W
    if len(data) != pos + n * record:
        raise ValueError(f"TOYV payload size mismatch: expected {pos + n * record} bytes, got {len(data)}")
    ids = np.empty(n, dtype=np.int64)
    shapes = np.empty(n, dtype=np.int64)
    motions = np.empty(n, dtype=np.int64)
    boxes = np.empty((n, T, 2), dtype=np.int8)
    frames = np.empty((n, T, H, W), dtype=np.float32)
    for i in range(n):
        ids[i], shapes[i], motions[i] = struct.unpack_from("<QBB", data, pos)
        pos += 10
        boxes[i] = np.frombuffer(data, dtype="<i1", count=2 * T, offset=pos).reshape(T, 2)
        pos += 2 * T
        frames[i] = np.frombuffer(data, dtype="<f4", count=T * H * W, offset=pos).reshape(T, H, W)
        pos += 4 * T * H * W
    return VideoSet(ids, frames, shapes, motions, boxes, float(noise))


def save_videos(path, videos: VideoSet) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_videos(videos))


def load_videos(path) -> VideoSet:
    with open(path, "rb") as fh:
        return loads_videos(fh.read())


def qa_to_text(qa: QASet) -> str:
    return "".join(f"{vid}\t{q}\t{a}\n" for vid, q, a in qa.records())


def qa_from_text(text: str, videos: VideoSet | None = None) -> QASet:
    ids, questions, answers = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            ids.append(int(parts[0]))
            questions.append(QUESTIONS.index(parts[1]))
            answers.append(ANSWERS.index(parts[2]))
        except ValueError:
            raise ValueError(f"line {lineno}: unrecognised record {line!r}") from None
    ids = np.asarray(ids, dtype=np.int64)
    if videos is not None:
        lookup = {int(v): i for i, v in enumerate(videos.ids)}
        missing = [v for v in ids if int(v) not in lookup]
        if missing:
            raise ValueError(f"QA references unknown video id {missing[0]}")
        index = np.asarray([lookup[int(v)] for v in ids], dtype=np.int64)
    else:
        index = np.arange(len(ids))
    return QASet(index, ids, np.asarray(questions, dtype=np.int64), np.asarray(answers, dtype=np.int64))


# -- faces ----------------------------------------------------------------------

@dataclass
class FaceDatasetSpec:
    num_identities: int = 10
    images_per_identity: int = 10
    image_size: int = 32
    noise: float = 0.05
    seed: int = 0


@dataclass
class FaceSet:
    images: np.ndarray
    labels: np.ndarray
    base: np.ndarray
    spec: FaceDatasetSpec = field(default_factory=FaceDatasetSpec)


def _face_pattern(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    img = np.full((size, size), rng.uniform(0.1, 0.3))
    cx, cy = 0.5 + rng.uniform(-0.05, 0.05), 0.5 + rng.uniform(-0.05, 0.05)
    rx, ry = rng.uniform(0.28, 0.4), rng.uniform(0.35, 0.45)
    face = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
    img[face] = rng.uniform(0.55, 0.85)
    eye_y = cy - rng.uniform(0.08, 0.16)
    eye_dx = rng.uniform(0.1, 0.17)
    eye_r = rng.uniform(0.04, 0.08)
    eye_val = rng.uniform(0.0, 0.25)
    for sign in (-1, 1):
        img[(xx - (cx + sign * eye_dx)) ** 2 + (yy - eye_y) ** 2 <= eye_r ** 2] = eye_val
    mouth_y = cy + rng.uniform(0.15, 0.25)
    mouth_w, mouth_h = rng.uniform(0.08, 0.2), rng.uniform(0.02, 0.05)
    img[(np.abs(xx - cx) <= mouth_w) & (np.abs(yy - mouth_y) <= mouth_h)] = rng.uniform(0.1, 0.35)
    # identity-specific low-frequency texture
    for _ in range(3):
        bx, by, bw = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.08, 0.2)
        img += rng.uniform(-0.15, 0.15) * np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * bw ** 2))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_faces(spec: FaceDatasetSpec | None = None, **overrides) -> FaceSet:
    spec = spec or FaceDatasetSpec(**overrides)
    rng = child_rng(spec.seed, "data", 2)
    base = np.stack([_face_pattern(rng, spec.image_size) for _ in range(spec.num_identities)])
    labels = np.repeat(np.arange(spec.num_identities), spec.images_per_identity)
    noise = rng.normal(0.0, spec.noise, size=(len(labels), spec.image_size, spec.image_size))
    images = np.clip(base[labels] + noise, 0.0, 1.0).astype(np.float32)
    return FaceSet(images, labels.astype(np.int64), base, spec)


# -- networks -----------------------------------------------------------------------

class FrameExtractor(Module):
    """Per-frame CNN: conv(1->8)+relu, pool, conv(8->16)+relu, pool -> (T, 4, 4, 16)."""

    def __init__(self, rng: np.random.Generator, dtype=None):
        self.conv1 = Conv2d(1, 8, rng, dtype=dtype)
        self.conv2 = Conv2d(8, 16, rng, dtype=dtype)

    def forward(self, frames) -> Tensor:
        frames = frames if isinstance(frames, Tensor) else Tensor(frames)
        if frames.ndim == 3:
            frames = F.reshape(frames, (1,) + frames.shape)
        B, T, H, W = frames.shape
        h = F.reshape(frames, (B * T, 1, H, W))
        h = F.mean_pool2d(F.relu(self.conv1(h)))
        h = F.mean_pool2d(F.relu(self.conv2(h)))
        h = F.transpose(h, (0, 2, 3, 1))
        return F.reshape(h, (B, T) + h.shape[1:])


class TaskPerformer(Module):
    """Answer head: video branch 2048->128, question branch 2->16, then 144->64->9."""

    def __init__(self, rng: np.random.Generator, in_features: int = int(np.prod(FEATURE_DIMS)), dtype=None):
        self.in_features = in_features
        self.video = Dense(in_features, 128, rng, dtype=dtype)
        self.question = Dense(len(QUESTIONS), 16, rng, dtype=dtype)
        self.hidden = Dense(144, 64, rng, dtype=dtype)
        self.out = Dense(64, len(ANSWERS), rng, dtype=dtype)

    def forward(self, x_dec, q) -> Tensor:
        x_dec = x_dec if isinstance(x_dec, Tensor) else Tensor(x_dec)
        q = q if isinstance(q, Tensor) else Tensor(np.asarray(q, dtype=x_dec.dtype))
        flat = F.reshape(x_dec, (x_dec.shape[0], self.in_features))
        v = F.relu(self.video(flat))
        e = self.question(q)
        h = F.relu(self.hidden(F.concat([v, e], axis=1)))
        return self.out(h)


class FaceNet(Module):
    """dense(1024->40)+relu [-> FeatComp(N) over the 40 hidden units] -> dense(40->10)."""

    HIDDEN = 40

    def __init__(self, rng: np.random.Generator, n_bits: int | None = None, image_size: int = 32,
                 n_classes: int = 10, dtype=None):
        self.image_size = image_size
        self.fc1 = Dense(image_size * image_size, self.HIDDEN, rng, dtype=dtype)
        self.bottleneck = FeatComp(FeatCompConfig(n_bits, (self.HIDDEN,)), rng, dtype=dtype) if n_bits else None
        self.fc2 = Dense(self.HIDDEN, n_classes, rng, dtype=dtype)

    def hidden(self, images) -> Tensor:
        images = images if isinstance(images, Tensor) else Tensor(images)
        flat = F.reshape(images, (images.shape[0] if images.ndim == 3 else 1, self.image_size ** 2))
        return F.relu(self.fc1(flat))

    def forward(self, images, rng=None, binarizer=None):
        """Return ``(hidden, logits, bits)``; ``bits`` is None without a bottleneck."""
        h = self.hidden(images)
        bits = None
        z = h
        if self.bottleneck is not None:
            z, bits = self.bottleneck(h, rng=rng, binarizer=binarizer)
        return h, self.fc2(z), bits


def frame_extractor_forward(video, params: FrameExtractor) -> np.ndarray:
    return params(video).data[0]


def task_performer_forward(x_dec, q, params: TaskPerformer) -> np.ndarray:
    return params(np.asarray(x_dec)[None], np.asarray(q, dtype=np.float64)[None]).data[0]


def face_net_forward(image, params: FaceNet, bottleneck=None):
    """Single-image pass; returns ``(hidden[40], logits[10])``.

    ``bottleneck`` overrides the net's own FeatComp when given.
    """
    was = params.bottleneck
    if bottleneck is not None:
        params.bottleneck = bottleneck
    try:
        h, logits, _ = params(np.asarray(image)[None])
    finally:
        params.bottleneck = was
    return h.data[0], logits.data[0]

