"""scikit-learn style estimators wrapping the numpy networks.

``FewBitVideoQA`` is the main model: frame extractor -> FeatComp-N ->
answer head.  ``n_bits=None`` removes the bottleneck (the float upper
bound) and ``q_only=True`` replaces the visual input by zeros.
"""
from __future__ import annotations

import logging
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import child_rng
from .diffcore import Adam, Dense, Tensor, container, functional as F, precision as _precision
from .featcomp import FeatComp, FeatCompConfig, to_signs
from .tasks import FEATURE_DIMS, FaceNet, FrameExtractor, TaskPerformer, answer_mask, question_onehot
from .validation import check_answers, check_batch_size, check_bits, check_questions, check_videos

log = logging.getLogger(__name__)

OBJECTIVES = ("task", "r_only", "task_plus_r")
FLAT_FEATURES = int(np.prod(FEATURE_DIMS))
_PREDICT_CHUNK = 256


class DivergenceError(FloatingPointError):
    pass


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def _check_finite(value: float, epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, step {step}")


def _masked_argmax(logits: np.ndarray, questions: np.ndarray) -> np.ndarray:
    return np.where(answer_mask(questions), logits, -np.inf).argmax(axis=1)


def _run(n: int, epochs: int, batch_size: int, opt: Adam, shuffle: np.random.Generator,
         step_fn: Callable[[np.ndarray], dict], verbose: int, label: str) -> list[dict]:
    """Shared epoch loop.  ``step_fn`` returns a dict of named loss Tensors; ``loss`` is optimized."""
    history = []
    for epoch in range(1, epochs + 1):
        sums: dict[str, float] = {}
        steps = 0
        for idx in _batches(n, batch_size, shuffle):
            opt.zero_grad()
            parts = step_fn(idx)
            loss = parts["loss"]
            _check_finite(float(loss.data), epoch, steps)
            loss.backward()
            opt.step()
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + float(value.data)
            steps += 1
        row = {"epoch": epoch, **{k: v / max(steps, 1) for k, v in sums.items()}}
        history.append(row)
        if verbose:
            log.info("%s epoch %d: %s", label, epoch,
                     ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
    return history


class FewBitVideoQA(ClassifierMixin, BaseEstimator):
    """Toy VideoQA model with an optional N-bit feature bottleneck.

    Parameters
    ----------
    n_bits : int or None
        Bit budget N.  ``None`` trains the float baseline without FeatComp.
    objective : {"task", "r_only", "task_plus_r"}
        ``task`` optimizes cross-entropy only.  ``task_plus_r`` adds
        ``recon_weight * MSE(x, x_dec)``.  ``r_only`` first fits FeatComp on
        reconstruction with the extractor frozen at float-baseline weights,
        then trains a fresh answer head on the frozen decoded features.
    q_only : bool
        Feed zeros instead of video features (question-only baseline).
    backbone : FewBitVideoQA or None
        Fitted float model whose extractor seeds ``r_only``; fitted on the
        fly when absent.
    """

    def __init__(self, n_bits=10, objective="task", q_only=False, recon_weight=1.0, epochs=3,
                 batch_size=32, lr_featcomp=1e-3, lr_task_model=1e-4, lr_backbone=1e-3,
                 train_backbone=True, backbone=None, random_state=0, precision="float32", verbose=0):
        self.n_bits = n_bits
        self.objective = objective
        self.q_only = q_only
        self.recon_weight = recon_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_featcomp = lr_featcomp
        self.lr_task_model = lr_task_model
        self.lr_backbone = lr_backbone
        self.train_backbone = train_backbone
        self.backbone = backbone
        self.random_state = random_state
        self.precision = precision
        self.verbose = verbose

    # -- construction -------------------------------------------------------

    def _check_params(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.n_bits is not None and int(self.n_bits) < 1:
            raise ValueError(f"n_bits must be >= 1 or None, got {self.n_bits}")
        if self.objective != "task" and (self.n_bits is None or self.q_only):
            raise ValueError(f"objective {self.objective!r} needs a bottleneck (n_bits) and visual input")
        check_batch_size(self.batch_size)

    def _build(self) -> None:
        init = child_rng(self.random_state, "init")
        self.extractor_ = None if self.q_only else FrameExtractor(init)
        self.featcomp_ = None
        if self.n_bits is not None and not self.q_only:
            self.featcomp_ = FeatComp(FeatCompConfig(int(self.n_bits), FEATURE_DIMS, self.random_state), init)
        self.performer_ = TaskPerformer(init)

    def _modules(self) -> dict:
        return {"extractor": self.extractor_, "featcomp": self.featcomp_, "performer": self.performer_}

    def _set_mode(self, training: bool) -> None:
        for m in self._modules().values():
            if m is not None:
                m.train(training)

    # -- forward pieces -----------------------------------------------------

    def _features(self, frames: np.ndarray) -> Tensor:
        if self.extractor_ is None:
            return Tensor(np.zeros((len(frames), FLAT_FEATURES)))
        return self.extractor_(frames)

    def _logits(self, frames, questions, rng=None) -> tuple[Tensor, Tensor, Tensor | None, np.ndarray | None]:
        x = self._features(frames)
        bits = None
        x_dec = x
        if self.featcomp_ is not None:
            x_dec, bits = self.featcomp_(x, rng=rng)
        return self.performer_(x_dec, question_onehot(questions)), x, x_dec, bits

    # -- fitting ------------------------------------------------------------

    def fit(self, X, y, questions=None):
        self._check_params()
        X = check_videos(X)
        y = check_answers(y, len(X))
        q = check_questions(questions, len(X))
        with _precision(self.precision):
            X = X.astype(np.dtype(self.precision))
            self._build()
            if self.objective == "r_only":
                self._fit_r_only(X, y, q)
            else:
                self._fit_joint(X, y, q)
        self.classes_ = np.arange(9)
        self._set_mode(False)
        return self

    def _init_loss(self, X, y, q) -> float:
        self._set_mode(False)
        k = min(len(X), _PREDICT_CHUNK)
        logits, *_ = self._logits(X[:k], q[:k])
        return float(F.softmax_cross_entropy(logits, y[:k]).data)

    def _fit_joint(self, X, y, q) -> None:
        groups = [{"params": self.performer_.parameters(), "lr": self.lr_task_model}]
        if self.featcomp_ is not None:
            groups.append({"params": self.featcomp_.parameters(), "lr": self.lr_featcomp})
        if self.extractor_ is not None:
            if self.train_backbone:
                groups.append({"params": self.extractor_.parameters(), "lr": self.lr_backbone})
            else:
                self.extractor_.requires_grad_(False)
        opt = Adam(groups)
        self.init_loss_ = self._init_loss(X, y, q)
        binarizer = child_rng(self.random_state, "binarizer")
        use_recon = self.objective == "task_plus_r"
        w = float(self.recon_weight)

        def step(idx):
            logits, x, x_dec, _ = self._logits(X[idx], q[idx], rng=binarizer)
            task = F.softmax_cross_entropy(logits, y[idx])
            if not use_recon:
                return {"loss": task, "task_loss": task}
            # reconstruction target is the extracted feature, held fixed
            recon = F.mse(x_dec, Tensor(x.data))
            return {"loss": task + F.scale(recon, w), "task_loss": task, "recon_loss": recon}

        self._set_mode(True)
        self.history_ = _run(len(X), self.epochs, int(self.batch_size), opt,
                             child_rng(self.random_state, "shuffle"), step, self.verbose, "joint")

    def _resolve_backbone(self, X, y, q) -> "FewBitVideoQA":
        if self.backbone is not None:
            check_is_fitted(self.backbone, "performer_")
            if self.backbone.extractor_ is None:
                raise ValueError("backbone has no frame extractor (q_only model)")
            return self.backbone
        params = self.get_params(deep=False)
        params.update(n_bits=None, objective="task", backbone=None)
        return FewBitVideoQA(**params).fit(X, y, q)

    def _fit_r_only(self, X, y, q) -> None:
        self.backbone_ = self._resolve_backbone(X, y, q)
        self.extractor_.load_state_dict(self.backbone_.extractor_.state_dict())
        self.extractor_.requires_grad_(False).eval()
        feats = np.concatenate([self.extractor_(X[i:i + _PREDICT_CHUNK]).data
                                for i in range(0, len(X), _PREDICT_CHUNK)])
        self.init_loss_ = self._init_loss(X, y, q)

        fc = self.featcomp_
        binarizer = child_rng(self.random_state, "binarizer")
        opt = Adam([{"params": fc.parameters(), "lr": self.lr_featcomp}])
        fc.train()

        def recon_step(idx):
            x = Tensor(feats[idx])
            x_dec, _ = fc(x, rng=binarizer)
            recon = F.mse(x_dec, x)
            return {"loss": recon, "recon_loss": recon}

        shuffle = child_rng(self.random_state, "shuffle")
        self.recon_history_ = _run(len(X), self.epochs, int(self.batch_size), opt, shuffle,
                                   recon_step, self.verbose, "r_only/recon")

        fc.eval()
        fc.requires_grad_(False)
        decoded = np.concatenate([fc(Tensor(feats[i:i + _PREDICT_CHUNK]))[0].data
                                  for i in range(0, len(X), _PREDICT_CHUNK)])
        self.performer_ = TaskPerformer(child_rng(self.random_state, "init", 3))
        opt = Adam([{"params": self.performer_.parameters(), "lr": self.lr_task_model}])
        onehot = question_onehot(q)

        def task_step(idx):
            task = F.softmax_cross_entropy(self.performer_(Tensor(decoded[idx]), onehot[idx]), y[idx])
            return {"loss": task, "task_loss": task}

        self.history_ = _run(len(X), self.epochs, int(self.batch_size), opt, shuffle,
                             task_step, self.verbose, "r_only/task")

    # -- inference ----------------------------------------------------------

    def decision_function(self, X, questions=None) -> np.ndarray:
        check_is_fitted(self, "performer_")
        X = check_videos(X)
        q = check_questions(questions, len(X))
        self._set_mode(False)
        with _precision(self.precision):
            out = [self._logits(X[i:i + _PREDICT_CHUNK], q[i:i + _PREDICT_CHUNK])[0].data
                   for i in range(0, len(X), _PREDICT_CHUNK)]
        return np.concatenate(out)

    def predict(self, X, questions=None) -> np.ndarray:
        """Argmax restricted to the answers admissible for each question."""
        q = check_questions(questions, len(X))
        return _masked_argmax(self.decision_function(X, q), q)

    def score(self, X, y, questions=None) -> float:
        y = check_answers(y, len(X))
        return float(np.mean(self.predict(X, questions) == y))

    def extract(self, X) -> np.ndarray:
        """Float features x of shape (n, T, 4, 4, 16)."""
        check_is_fitted(self, "performer_")
        if self.extractor_ is None:
            raise ValueError("q_only model has no feature extractor")
        X = check_videos(X)
        return np.concatenate([self.extractor_(X[i:i + _PREDICT_CHUNK]).data
                               for i in range(0, len(X), _PREDICT_CHUNK)])

    def transform(self, X) -> np.ndarray:
        """Stored codes x_bin (n, N) from the deterministic sign rule."""
        check_is_fitted(self, "performer_")
        if self.featcomp_ is None:
            raise ValueError("model has no bottleneck; nothing to binarize")
        feats = self.extract(X)
        return np.concatenate([self.featcomp_.compress(feats[i:i + _PREDICT_CHUNK])
                               for i in range(0, len(feats), _PREDICT_CHUNK)])

    def pre_binarization(self, X) -> np.ndarray:
        """tanh activations feeding the binarizer, eval mode."""
        feats = self.extract(X)
        self.featcomp_.eval()
        return self.featcomp_.activate(self.featcomp_.encode(feats)).data


class StoredBitsQA(ClassifierMixin, BaseEstimator):
    """Fresh decoder + answer head trained on stored N-bit codes only."""

    def __init__(self, epochs=3, batch_size=32, lr_decoder=1e-3, lr_task_model=1e-4,
                 random_state=0, precision="float32", verbose=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_decoder = lr_decoder
        self.lr_task_model = lr_task_model
        self.random_state = random_state
        self.precision = precision
        self.verbose = verbose

    def fit(self, bits, y, questions=None):
        bits = check_bits(bits)
        y = check_answers(y, len(bits))
        q = check_questions(questions, len(bits))
        check_batch_size(self.batch_size)
        with _precision(self.precision):
            init = child_rng(self.random_state, "init", 5)
            self.n_bits_ = bits.shape[1]
            self.decoder_ = Dense(self.n_bits_, FLAT_FEATURES, init)
            self.performer_ = TaskPerformer(init)
            signs = to_signs(bits)
            onehot = question_onehot(q)
            opt = Adam([{"params": self.decoder_.parameters(), "lr": self.lr_decoder},
                        {"params": self.performer_.parameters(), "lr": self.lr_task_model}])

            def step(idx):
                task = F.softmax_cross_entropy(self.performer_(self.decoder_(Tensor(signs[idx])), onehot[idx]), y[idx])
                return {"loss": task, "task_loss": task}

            self.history_ = _run(len(bits), self.epochs, int(self.batch_size), opt,
                                 child_rng(self.random_state, "shuffle", 5), step, self.verbose, "bits")
        self.classes_ = np.arange(9)
        return self

    def decision_function(self, bits, questions=None) -> np.ndarray:
        check_is_fitted(self, "performer_")
        bits = check_bits(bits, self.n_bits_)
        q = check_questions(questions, len(bits))
        with _precision(self.precision):
            return self.performer_(self.decoder_(Tensor(to_signs(bits))), question_onehot(q)).data

    def predict(self, bits, questions=None) -> np.ndarray:
        q = check_questions(questions, len(np.atleast_2d(bits)))
        return _masked_argmax(self.decision_function(bits, q), q)

    def score(self, bits, y, questions=None) -> float:
        return float(np.mean(self.predict(bits, questions) == check_answers(y, len(np.atleast_2d(bits)))))


class FaceNetClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Two-layer identity classifier with an optional N-bit bottleneck on its 40 hidden units.

    Training runs until the train accuracy reaches ``target_accuracy`` (checked
    after each epoch past ``min_epochs``) or ``max_epochs`` is hit;
    ``reached_target_`` records which.
    """

    def __init__(self, n_bits=None, max_epochs=300, min_epochs=20, batch_size=20, lr=1e-3,
                 target_accuracy=0.975, random_state=0, precision="float32"):
        self.n_bits = n_bits
        self.max_epochs = max_epochs
        self.min_epochs = min_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.target_accuracy = target_accuracy
        self.random_state = random_state
        self.precision = precision

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.dtype(self.precision))
        if X.ndim != 3 or X.shape[1] != X.shape[2]:
            raise ValueError(f"expected square grayscale images (n, S, S), got {X.shape}")
        y = np.asarray(y, dtype=np.int64)
        check_batch_size(self.batch_size)
        self.classes_ = np.unique(y)
        if not np.array_equal(self.classes_, np.arange(len(self.classes_))):
            raise ValueError("labels must be 0..K-1")
        with _precision(self.precision):
            self.net_ = FaceNet(child_rng(self.random_state, "init", 9), self.n_bits, X.shape[1], len(self.classes_))
            opt = Adam(self.net_.parameters(), lr=self.lr)
            shuffle = child_rng(self.random_state, "shuffle", 9)
            binarizer = child_rng(self.random_state, "binarizer", 9)
            self.history_ = []
            self.reached_target_ = False
            for epoch in range(1, self.max_epochs + 1):
                self.net_.train()
                total, steps = 0.0, 0
                for idx in _batches(len(X), int(self.batch_size), shuffle):
                    opt.zero_grad()
                    _, logits, _ = self.net_(X[idx], rng=binarizer)
                    loss = F.softmax_cross_entropy(logits, y[idx])
                    _check_finite(float(loss.data), epoch, steps)
                    loss.backward()
                    opt.step()
                    total += float(loss.data)
                    steps += 1
                acc = float(np.mean(self.predict(X) == y))
                self.history_.append({"epoch": epoch, "loss": total / max(steps, 1), "train_accuracy": acc})
                if epoch >= self.min_epochs and acc >= self.target_accuracy:
                    self.reached_target_ = True
                    break
        self.train_accuracy_ = self.history_[-1]["train_accuracy"]
        self.net_.eval()
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        self.net_.eval()
        with _precision(self.precision):
            return self.net_(np.asarray(X, dtype=np.dtype(self.precision)))[1].data

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)

    def hidden(self, X) -> np.ndarray:
        """The 40 floats before the last linear layer (no bottleneck applied)."""
        check_is_fitted(self, "net_")
        with _precision(self.precision):
            return self.net_.hidden(np.asarray(X, dtype=np.dtype(self.precision))).data

    def transform(self, X) -> np.ndarray:
        """Stored bits for bottleneck nets, hidden floats otherwise."""
        h = self.hidden(X)
        if self.net_.bottleneck is None:
            return h
        self.net_.eval()
        return self.net_.bottleneck.compress(h)


# -- persistence ----------------------------------------------------------------

_ESTIMATORS = {cls.__name__: cls for cls in (FewBitVideoQA, StoredBitsQA, FaceNetClassifier)}
_MODULE_ATTRS = {
    "FewBitVideoQA": ("extractor_", "featcomp_", "performer_"),
    "StoredBitsQA": ("decoder_", "performer_"),
    "FaceNetClassifier": ("net_",),
}


def save_model(estimator, path) -> None:
    """Write a fitted estimator's parameters and hyperparameters to an FCMP file."""
    name = type(estimator).__name__
    if name not in _ESTIMATORS:
        raise TypeError(f"cannot serialize {name}")
    arrays = {}
    for attr in _MODULE_ATTRS[name]:
        module = getattr(estimator, attr, None)
        check_is_fitted(estimator, _MODULE_ATTRS[name][-1])
        if module is None:
            continue
        for key, value in module.state_dict().items():
            arrays[f"{attr.rstrip('_')}.{key}"] = value
    params = {k: v for k, v in estimator.get_params(deep=False).items() if k != "backbone"}
    meta = {"estimator": name, "params": params, "fitted": {}}
    for attr in ("n_bits_", "train_accuracy_", "reached_target_"):
        if hasattr(estimator, attr):
            meta["fitted"][attr] = getattr(estimator, attr)
    if name == "FaceNetClassifier":
        meta["fitted"]["n_classes"] = int(len(estimator.classes_))
        meta["fitted"]["image_size"] = int(estimator.net_.image_size)
    container.save(path, arrays, meta)


def load_model(path):
    arrays, meta = container.load(path)
    name = meta.get("estimator")
    if name not in _ESTIMATORS:
        raise container.ContainerError(f"{path}: unknown estimator {name!r}")
    est = _ESTIMATORS[name](**meta["params"])
    fitted = meta.get("fitted", {})
    with _precision(est.precision):
        rng = np.random.default_rng(0)
        if name == "FewBitVideoQA":
            est._build()
        elif name == "StoredBitsQA":
            est.n_bits_ = int(fitted["n_bits_"])
            est.decoder_ = Dense(est.n_bits_, FLAT_FEATURES, rng)
            est.performer_ = TaskPerformer(rng)
        else:
            est.net_ = FaceNet(rng, est.n_bits, fitted["image_size"], fitted["n_classes"])
    for attr in _MODULE_ATTRS[name]:
        module = getattr(est, attr)
        if module is None:
            continue
        prefix = attr.rstrip("_") + "."
        module.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        module.eval()
    for key, value in fitted.items():
        if key.endswith("_"):
            setattr(est, key, value)
    est.classes_ = np.arange(fitted.get("n_classes", 9))
    return est
