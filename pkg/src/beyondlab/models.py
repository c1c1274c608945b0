"""The four networks: target classifier, SSL trunk + projector/predictor, class head."""

from __future__ import annotations

import hashlib
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dataio
from .ndt import DegenerateEmbedding, NonFiniteError, ShapeError, Tape, Tensor, backward, ops, row_cosine

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    kind = "diverged"

    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"training diverged at step {step} (loss={loss})")


class CollapseError(RuntimeError):
    kind = "collapse"

    def __init__(self, std: float):
        self.std = std
        super().__init__(f"collapse: embedding std {std:.2e} across batch")


class TrunkMutated(RuntimeError):
    kind = "trunk-mutated"


# -- layers -------------------------------------------------------------------

def conv(name: str, c_in: int, c_out: int, k: int = 3) -> dict:
    return {"type": "conv", "name": name, "in": c_in, "out": c_out, "k": k}


def dense(name: str, d_in: int, d_out: int) -> dict:
    return {"type": "dense", "name": name, "in": d_in, "out": d_out}


RELU = {"type": "relu"}
POOL = {"type": "pool"}
FLATTEN = {"type": "flatten"}


class Sequential:
    """A stack of layer descriptors with named parameter tensors."""

    def __init__(self, layers: Sequence[dict], rng: np.random.Generator | None = None, input_shape=None):
        self.layers = [dict(l) for l in layers]
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.params: dict[str, Tensor] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        for layer in self.layers:
            if layer["type"] == "conv":
                fan_in = layer["in"] * layer["k"] ** 2
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (layer["out"], layer["in"], layer["k"], layer["k"]))
                self._add(layer["name"] + ".w", w)
                self._add(layer["name"] + ".b", np.zeros(layer["out"]))
            elif layer["type"] == "dense":
                w = rng.normal(0.0, np.sqrt(2.0 / layer["in"]), (layer["in"], layer["out"]))
                self._add(layer["name"] + ".w", w)
                self._add(layer["name"] + ".b", np.zeros(layer["out"]))

    def _add(self, name, arr):
        self.params[name] = Tensor(arr, requires_grad=False, name=name)

    def __call__(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError("input", x.shape[1:], self.input_shape)
        for layer in self.layers:
            kind = layer["type"]
            if kind == "conv":
                p = layer["name"]
                x = ops.bias_add(ops.conv2d(x, self.params[p + ".w"], padding=layer["k"] // 2), self.params[p + ".b"])
            elif kind == "dense":
                p = layer["name"]
                x = ops.bias_add(ops.matmul(x, self.params[p + ".w"]), self.params[p + ".b"])
            elif kind == "relu":
                x = ops.relu(x)
            elif kind == "pool":
                x = ops.avg_pool2d(x, 2)
            elif kind == "flatten":
                x = ops.flatten(x)
            else:
                raise ValueError(f"unknown layer type {kind}")
        return x

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    @property
    def out_dim(self) -> int:
        dims = [l["out"] for l in self.layers if l["type"] == "dense"]
        return dims[-1]

    def num_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(k, v.data) for k, v in self.params.items()]

    def load_state(self, arrays: Sequence[tuple[str, np.ndarray]]) -> None:
        for name, arr in arrays:
            if name not in self.params or self.params[name].shape != arr.shape:
                raise dataio.TopologyMismatchError(f"parameter {name} {arr.shape} does not fit network")
            self.params[name] = Tensor(arr, requires_grad=False, name=name)

    def topology(self) -> dict:
        return {"layers": self.layers, "input_shape": list(self.input_shape) if self.input_shape else None}


def _trunk_layers(channels: int, hw: tuple[int, int], widths=(8, 16), feature_dim: int = 64) -> list[dict]:
    c1, c2 = widths
    flat = c2 * (hw[0] // 4) * (hw[1] // 4)
    return [
        conv("conv1", channels, c1), RELU, POOL,
        conv("conv2", c1, c2), RELU, POOL,
        FLATTEN, dense("fc", flat, feature_dim),
    ]


class ClassifierNet(Sequential):
    """Target classifier c(.): two conv blocks and two dense layers."""

    def __init__(self, num_classes: int, input_shape=(3, 32, 32), widths=(8, 16), hidden: int = 64, seed: int = 0, layers=None):
        c, h, w = input_shape
        flat = widths[1] * (h // 4) * (w // 4)
        if layers is None:
            layers = [
                conv("conv1", c, widths[0]), RELU, POOL,
                conv("conv2", widths[0], widths[1]), RELU, POOL,
                FLATTEN, dense("fc1", flat, hidden), RELU, dense("fc2", hidden, num_classes),
            ]
        super().__init__(layers, np.random.default_rng(seed), input_shape)
        self.num_classes = num_classes
        self.metrics: dict = {}
        self.config: dict = {"num_classes": num_classes, "widths": list(widths), "hidden": hidden, "seed": seed}


class ClassHead(Sequential):
    """g(.): one dense layer from trunk features to logits."""

    def __init__(self, feature_dim: int, num_classes: int, seed: int = 0):
        super().__init__([dense("head", feature_dim, num_classes)], np.random.default_rng(seed))
        self.num_classes = num_classes
        self.metrics: dict = {}
        self.config = {"feature_dim": feature_dim, "num_classes": num_classes, "seed": seed}


class SSLEncoder:
    """SimSiam-style encoder: trunk f(.), projector h(.) (3 FCs), predictor (2 FCs)."""

    def __init__(self, input_shape=(3, 32, 32), widths=(8, 16), feature_dim: int = 64,
                 proj_dim: int = 32, pred_hidden: int = 16, seed: int = 0):
        c, h, w = input_shape
        rng = np.random.default_rng(seed)
        self.trunk = Sequential(_trunk_layers(c, (h, w), widths, feature_dim), rng, input_shape)
        self.projector = Sequential(
            [dense("proj1", feature_dim, feature_dim), RELU, dense("proj2", feature_dim, feature_dim), RELU,
             dense("proj3", feature_dim, proj_dim)], rng)
        self.predictor = Sequential([dense("pred1", proj_dim, pred_hidden), RELU, dense("pred2", pred_hidden, proj_dim)], rng)
        self.feature_dim = feature_dim
        self.proj_dim = proj_dim
        self.metrics: dict = {}
        self.config = {"widths": list(widths), "feature_dim": feature_dim, "proj_dim": proj_dim,
                       "pred_hidden": pred_hidden, "seed": seed}

    def parts(self) -> dict[str, Sequential]:
        return {"trunk": self.trunk, "projector": self.projector, "predictor": self.predictor}

    def set_trainable(self, flag: bool) -> None:
        for p in self.parts().values():
            p.set_trainable(flag)

    def features(self, x) -> Tensor:
        return self.trunk(x)

    def embed(self, x) -> Tensor:
        return self.projector(self.trunk(x))


@dataclass
class ModelBundle:
    classifier: ClassifierNet | None = None
    encoder: SSLEncoder | None = None
    head: ClassHead | None = None

    def networks(self) -> dict[str, Sequential]:
        nets: dict[str, Sequential] = {}
        if self.classifier is not None:
            nets["classifier"] = self.classifier
        if self.encoder is not None:
            for k, v in self.encoder.parts().items():
                nets[f"encoder.{k}"] = v
        if self.head is not None:
            nets["head"] = self.head
        return nets

    def num_params(self) -> int:
        return sum(n.num_params() for n in self.networks().values())

    def freeze(self) -> None:
        for net in self.networks().values():
            net.set_trainable(False)


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch: int = 64
    lr: float = 0.05
    seed: int = 0
    momentum: float = 0.9


class SGD:
    """Plain SGD with heavy-ball momentum."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.steps = 0

    def step(self, grads) -> None:
        self.steps += 1
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += grads[name].data
            with np.errstate(over="ignore", invalid="ignore"):
                new = p.data - self.lr * v
            if not np.all(np.isfinite(new)):
                raise TrainingDiverged(self.steps, float("nan"))
            p.data = new


def _as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, dataio.DatasetContainer):
        return data.as_float(), data.labels.astype(np.int64)
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i:i + batch]


@contextmanager
def _forward_guard(step: int):
    """Overflow inside a primitive during training is divergence at ``step``."""
    try:
        yield
    except NonFiniteError:
        raise TrainingDiverged(step, float("nan")) from None


def _check_loss(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(step, value)


def predict_labels(fn: Callable[[Tensor], Tensor], x: np.ndarray, batch: int = 256) -> np.ndarray:
    out = [np.argmax(fn(Tensor(x[i:i + batch])).data, axis=1) for i in range(0, x.shape[0], batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(fn, x, y) -> float:
    return float(np.mean(predict_labels(fn, x) == y)) if len(y) else float("nan")


def train_classifier(train, config: TrainConfig, test=None, net: ClassifierNet | None = None) -> ClassifierNet:
    """Cross-entropy SGD training; deterministic under ``config.seed``."""
    x, y = _as_xy(train)
    num_classes = train.num_classes if isinstance(train, dataio.DatasetContainer) else int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise ValueError("training set needs at least two classes")
    if net is None:
        net = ClassifierNet(num_classes, x.shape[1:], seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    opt = SGD(net.params, config.lr, config.momentum)
    net.set_trainable(True)
    step = 0
    try:
        for _ in range(config.epochs):
            for idx in _batches(len(y), config.batch, rng):
                step += 1
                with _forward_guard(step), Tape() as tape:
                    loss = ops.mean(ops.softmax_cross_entropy(net(Tensor(x[idx])), y[idx]))
                _check_loss(loss.item(), step)
                opt.step(backward(tape, loss, net.params))
    finally:
        net.set_trainable(False)
    net.metrics = {"train_acc": accuracy(net, x, y), "steps": step}
    if test is not None:
        xt, yt = _as_xy(test)
        net.metrics["test_acc"] = accuracy(net, xt, yt)
    return net


def simsiam_loss(p1: Tensor, z2: Tensor, p2: Tensor, z1: Tensor) -> Tensor:
    """-(cos(p1, sg(z2)) + cos(p2, sg(z1))) / 2, averaged over the batch."""
    c1 = ops.mean(row_cosine(p1, ops.stop_gradient(z2)))
    c2 = ops.mean(row_cosine(p2, ops.stop_gradient(z1)))
    return (c1 + c2) * -0.5


def embedding_std(z: np.ndarray) -> float:
    """Mean per-coordinate std of l2-normalised embeddings."""
    zn = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    return float(zn.std(axis=0).mean())


@dataclass
class SSLConfig(TrainConfig):
    aug_policy: list | None = None
    collapse_threshold: float = 1e-4
    pred_lr_scale: float = 1.0
    center: bool = True
    batch_center: bool = True


def _batch_centered(z: Tensor) -> Tensor:
    n = z.shape[0]
    return ops.matmul(Tensor(np.eye(n) - 1.0 / n), z)


def _batched_pair(z1: Tensor, z2: Tensor):
    return _batch_centered(z1), _batch_centered(z2)


def center_embeddings(encoder: SSLEncoder, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Shift the last projector bias so embeddings of ``x`` have zero mean.

    Without batch norm the embeddings share a large common component, which
    pushes every cosine towards 1; removing it keeps the geometry of the rest.
    """
    z = np.concatenate([encoder.embed(Tensor(x[i:i + batch])).data for i in range(0, x.shape[0], batch)])
    mu = z.mean(axis=0)
    last = [l for l in encoder.projector.layers if l["type"] == "dense"][-1]["name"] + ".b"
    encoder.projector.params[last] = Tensor(encoder.projector.params[last].data - mu, name=last)
    return mu


def train_ssl(train, config: SSLConfig, encoder: SSLEncoder | None = None) -> SSLEncoder:
    """SimSiam training with two independently augmented views per image."""
    from .augment import apply_policy, sample_params, ssl_policy

    x, _ = _as_xy(train)
    policy = config.aug_policy if config.aug_policy is not None else ssl_policy()
    if encoder is None:
        encoder = SSLEncoder(x.shape[1:], seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    params = {}
    for part in encoder.parts().values():
        params.update(part.params)
    opt = SGD(params, config.lr, config.momentum)
    losses = []
    encoder.set_trainable(True)
    step = 0
    try:
        for _ in range(config.epochs):
            epoch_loss, nb = 0.0, 0
            for idx in _batches(x.shape[0], config.batch, rng):
                xb = x[idx]
                v1 = apply_policy(Tensor(xb), sample_params(policy, len(idx), rng)).data
                v2 = apply_policy(Tensor(xb), sample_params(policy, len(idx), rng)).data
                step += 1
                with _forward_guard(step), Tape() as tape:
                    z1 = encoder.embed(Tensor(v1))
                    z2 = encoder.embed(Tensor(v2))
                    if config.batch_center:
                        z1, z2 = _batched_pair(z1, z2)
                    loss = simsiam_loss(encoder.predictor(z1), z2, encoder.predictor(z2), z1)
                _check_loss(loss.item(), step)
                grads = backward(tape, loss, params)
                if config.pred_lr_scale != 1.0:
                    for name in encoder.predictor.params:
                        grads[name] = Tensor(grads[name].data * config.pred_lr_scale)
                opt.step(grads)
                epoch_loss += loss.item()
                nb += 1
                std = embedding_std(z1.data)
                if std < config.collapse_threshold:
                    raise CollapseError(std)
            losses.append(epoch_loss / max(nb, 1))
    finally:
        encoder.set_trainable(False)
    encoder.metrics = {"loss_history": losses, "steps": step}
    if config.center:
        encoder.metrics["center_norm"] = float(np.linalg.norm(center_embeddings(encoder, x)))
    encoder.metrics["initial_loss"] = losses[0] if losses else None
    encoder.metrics["final_loss"] = losses[-1] if losses else None
    return encoder


@dataclass
class HeadConfig(TrainConfig):
    augment: bool = True
    aug_rounds: int = 3


def train_class_head(encoder: SSLEncoder, train, config: HeadConfig, test=None) -> ClassHead:
    """Linear probe on frozen trunk features (optionally of augmented views)."""
    from .augment import apply_policy, default_policy, sample_params

    x, y = _as_xy(train)
    num_classes = train.num_classes if isinstance(train, dataio.DatasetContainer) else int(y.max()) + 1
    encoder.trunk.set_trainable(False)
    before = encoder.trunk.checksum()
    head = ClassHead(encoder.feature_dim, num_classes, seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    opt = SGD(head.params, config.lr, config.momentum)
    policy = default_policy()
    clean_feats = _features(encoder, x)
    # a few fixed augmented copies of the set; trunk features are frozen so they can be cached
    rounds = [clean_feats]
    if config.augment:
        for _ in range(max(config.aug_rounds, 1)):
            xa = apply_policy(Tensor(x), sample_params(policy, x.shape[0], rng)).data
            rounds.append(_features(encoder, xa))
    # train on standardized features, then fold the affine map back into the head
    mu = np.mean(rounds, axis=(0, 1))
    sd = np.std(np.concatenate(rounds), axis=0) + 1e-6
    rounds = [(f - mu) / sd for f in rounds]
    head.set_trainable(True)
    step = 0
    try:
        for epoch in range(config.epochs):
            feats = rounds[epoch % len(rounds)]
            for idx in _batches(len(y), config.batch, rng):
                step += 1
                with _forward_guard(step), Tape() as tape:
                    loss = ops.mean(ops.softmax_cross_entropy(head(Tensor(feats[idx])), y[idx]))
                _check_loss(loss.item(), step)
                opt.step(backward(tape, loss, head.params))
    finally:
        head.set_trainable(False)
    if encoder.trunk.checksum() != before:
        raise TrunkMutated("trunk parameters changed while training the class head")
    w, b = head.params["head.w"].data, head.params["head.b"].data
    head.params["head.w"] = Tensor(w / sd[:, None], name="head.w")
    head.params["head.b"] = Tensor(b - (mu / sd) @ w, name="head.b")
    head.metrics = {"train_acc": float(np.mean(np.argmax(head(Tensor(clean_feats)).data, 1) == y)), "steps": step}
    if test is not None:
        xt, yt = _as_xy(test)
        head.metrics["test_acc"] = float(np.mean(np.argmax(head(Tensor(_features(encoder, xt))).data, 1) == yt))
    return head


def _features(encoder: SSLEncoder, x: np.ndarray, batch: int = 256) -> np.ndarray:
    return np.concatenate([encoder.features(Tensor(x[i:i + batch])).data for i in range(0, x.shape[0], batch)])


# -- inference ----------------------------------------------------------------

@dataclass
class Prediction:
    label: int | np.ndarray
    logits: np.ndarray


def _batched(x) -> tuple[np.ndarray, bool]:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        return arr[None], True
    return arr, False


def classify(net: ClassifierNet, x) -> Prediction:
    """Label = argmax of logits (lowest index wins ties)."""
    arr, single = _batched(x)
    logits = net(Tensor(arr)).data
    labels = np.argmax(logits, axis=1)
    if single:
        return Prediction(int(labels[0]), logits[0])
    return Prediction(labels, logits)


def ssl_logits(encoder: SSLEncoder, head: ClassHead, x) -> Tensor:
    return head(encoder.trunk(x))


def ssl_predict(encoder: SSLEncoder, head: ClassHead, x) -> int | np.ndarray:
    arr, single = _batched(x)
    labels = np.argmax(ssl_logits(encoder, head, Tensor(arr)).data, axis=1)
    return int(labels[0]) if single else labels


def represent(encoder: SSLEncoder, x) -> np.ndarray:
    """Projector output h(f(x)); raises on a zero embedding."""
    arr, single = _batched(x)
    z = encoder.embed(Tensor(arr)).data
    if np.any(np.linalg.norm(z, axis=1) <= 1e-12):
        raise DegenerateEmbedding("represent: zero embedding")
    return z[0] if single else z


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, bundle: ModelBundle, meta: dict | None = None) -> None:
    header = {"format": "beyondlab-bundle", "meta": meta or {}, "networks": {}}
    arrays = []
    if bundle.classifier is not None:
        header["networks"]["classifier"] = {"config": bundle.classifier.config, "metrics": bundle.classifier.metrics,
                                            "topology": bundle.classifier.topology()}
    if bundle.encoder is not None:
        header["networks"]["encoder"] = {"config": bundle.encoder.config, "metrics": bundle.encoder.metrics,
                                         "input_shape": list(bundle.encoder.trunk.input_shape),
                                         "topology": {k: v.topology() for k, v in bundle.encoder.parts().items()}}
    if bundle.head is not None:
        header["networks"]["head"] = {"config": bundle.head.config, "metrics": bundle.head.metrics,
                                      "topology": bundle.head.topology()}
    for prefix, net in bundle.networks().items():
        arrays.extend((f"{prefix}/{name}", arr) for name, arr in net.state())
    dataio.save_checkpoint_arrays(path, arrays, header)


def load_checkpoint(path) -> ModelBundle:
    meta, arrays = dataio.load_checkpoint_arrays(path)
    nets = meta.get("networks", {})
    bundle = ModelBundle()
    try:
        if "classifier" in nets:
            cfg = nets["classifier"]["config"]
            topo = nets["classifier"]["topology"]
            bundle.classifier = ClassifierNet(cfg["num_classes"], topo["input_shape"], seed=cfg["seed"], layers=topo["layers"])
            bundle.classifier.config = cfg
            bundle.classifier.metrics = nets["classifier"].get("metrics", {})
        if "encoder" in nets:
            cfg = nets["encoder"]["config"]
            enc = SSLEncoder(nets["encoder"]["input_shape"], tuple(cfg["widths"]), cfg["feature_dim"],
                             cfg["proj_dim"], cfg["pred_hidden"], cfg["seed"])
            for part, topo in nets["encoder"]["topology"].items():
                if [dict(l) for l in topo["layers"]] != getattr(enc, part).layers:
                    raise dataio.TopologyMismatchError(f"encoder {part} topology differs from its config")
            enc.metrics = nets["encoder"].get("metrics", {})
            bundle.encoder = enc
        if "head" in nets:
            cfg = nets["head"]["config"]
            bundle.head = ClassHead(cfg["feature_dim"], cfg["num_classes"], cfg["seed"])
            bundle.head.metrics = nets["head"].get("metrics", {})
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, dataio.DataIOError):
            raise
        raise dataio.TopologyMismatchError(f"bad network description: {exc}") from None
    grouped: dict[str, list] = {}
    for name, arr in arrays:
        prefix, _, pname = name.partition("/")
        grouped.setdefault(prefix, []).append((pname, arr))
    targets = bundle.networks()
    for prefix, net in targets.items():
        got = grouped.pop(prefix, [])
        if [n for n, _ in got] != list(net.params):
            raise dataio.TopologyMismatchError(f"{prefix}: parameter list does not match topology")
        net.load_state(got)
    if grouped:
        raise dataio.TopologyMismatchError(f"unexpected parameter groups {sorted(grouped)}")
    return bundle


def config_dict(cfg) -> dict:
    return asdict(cfg)
