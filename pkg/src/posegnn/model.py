"""Node-pose and graph-pose models, the weighted pose loss, training and inference."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .graph import Graph, knn_graph, stitch_test_graph
from .layers import (
    GcnLayer,
    LinearHead,
    StateError,
    WlLayer,
    conv_backward,
    conv_forward,
    head_backward,
    head_forward,
    mean_readout,
    mean_readout_backward,
)
from .numerics import ShapeError, as_matrix, make_rng, relu_backward
from .pose import Pose, median, orientation_error, position_error, quat_normalize

log = logging.getLogger(__name__)

NODE_POSE = "node_pose"
GRAPH_POSE = "graph_pose"
ENV_ALPHA = {"indoor": 10.0, "outdoor": 200.0}


class DivergenceError(ArithmeticError):
    def __init__(self, epoch: int, learning_rate: float):
        super().__init__(f"loss became non-finite at epoch {epoch} (learning_rate={learning_rate:g})")
        self.epoch = epoch
        self.learning_rate = learning_rate


@dataclass(frozen=True)
class TrainConfig:
    k: int = 8
    alpha: float = 10.0
    learning_rate: float = 1e-3
    epochs: int = 200
    seed: int = 0
    conv_type: str = "wl"
    mode: str = NODE_POSE
    activation: str = "relu"
    widths: tuple[int, ...] = (256, 128, 64)
    momentum: float = 0.0
    batch_size: int = 1
    optimizer: str = "gd"
    # multiplies the initial WL neighbor weights; 1.0 is plain Glorot init
    neighbor_init_scale: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.conv_type not in ("gcn", "wl"):
            raise ValueError(f"conv_type must be 'gcn' or 'wl', got {self.conv_type!r}")
        if self.mode not in (NODE_POSE, GRAPH_POSE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"optimizer must be 'gd' or 'adam', got {self.optimizer!r}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"activation must be 'relu' or 'none', got {self.activation!r}")
        if len(self.widths) != 3:
            raise ValueError("exactly 3 graph convolution widths are required")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @classmethod
    def for_environment(cls, env: str, **kwargs) -> "TrainConfig":
        return cls(alpha=ENV_ALPHA[env], **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass(frozen=True)
class LossReport:
    total: float
    position_term: float
    orientation_term: float
    alpha: float


def poses_to_arrays(poses: Sequence[Pose]) -> tuple[np.ndarray, np.ndarray]:
    p = np.array([pose.position for pose in poses], dtype=np.float64).reshape(-1, 3)
    q = np.array([pose.orientation for pose in poses], dtype=np.float64).reshape(-1, 4)
    return p, q


def _loss_parts(pred_pos, pred_ori, truth, alpha, mask):
    pred_pos = as_matrix(pred_pos, "pred_pos")
    pred_ori = as_matrix(pred_ori, "pred_ori")
    if isinstance(truth, tuple):
        tp, tq = (as_matrix(t) for t in truth)
    else:
        tp, tq = poses_to_arrays(truth)
    n = pred_pos.shape[0]
    if pred_ori.shape[0] != n or tp.shape[0] != n or tq.shape[0] != n:
        raise ShapeError("prediction and truth row counts disagree")
    if pred_pos.shape[1] != 3 or pred_ori.shape[1] != 4:
        raise ShapeError("predictions must be n x 3 and n x 4")
    sq = np.einsum("ij,ij->i", tq, tq)
    off = np.abs(sq - 1.0) > 1e-12
    if off.any():
        tq = tq.copy()
        tq[off] /= np.sqrt(sq[off])[:, None]
    rows = np.arange(n) if mask is None else np.asarray(mask, dtype=np.int64).reshape(-1)
    if rows.size == 0:
        raise ValueError("loss mask selects no rows")
    if rows.min() < 0 or rows.max() >= n:
        raise ValueError("loss mask index out of range")
    rp = pred_pos[rows] - tp[rows]
    rq = pred_ori[rows] - tq[rows]
    return n, rows, rp, rq


def pose_loss(pred_pos, pred_ori, truth, alpha: float, mask=None) -> LossReport:
    """Mean over the masked rows of |p_hat - p| + alpha * |q_hat - q|.

    ``truth`` is a list of poses or a ``(positions, quaternions)`` pair.
    Truth quaternions are normalized; predicted ones are used raw.
    """
    _, _, rp, rq = _loss_parts(pred_pos, pred_ori, truth, alpha, mask)
    pos_term = float(np.mean(np.linalg.norm(rp, axis=1)))
    ori_term = float(np.mean(np.linalg.norm(rq, axis=1)))
    return LossReport(pos_term + alpha * ori_term, pos_term, ori_term, float(alpha))


def pose_loss_grad(pred_pos, pred_ori, truth, alpha: float, mask=None):
    """Loss report plus gradients w.r.t. both prediction matrices.

    A zero residual row gets a zero gradient.
    """
    n, rows, rp, rq = _loss_parts(pred_pos, pred_ori, truth, alpha, mask)
    m = rows.size
    npos = np.linalg.norm(rp, axis=1)
    nori = np.linalg.norm(rq, axis=1)
    pos_term = float(np.mean(npos))
    ori_term = float(np.mean(nori))
    dpos = np.zeros((n, 3))
    dori = np.zeros((n, 4))
    safe_p = np.where(npos > 0, npos, 1.0)
    safe_q = np.where(nori > 0, nori, 1.0)
    np.add.at(dpos, rows, rp / safe_p[:, None] / m)
    np.add.at(dori, rows, alpha * rq / safe_q[:, None] / m)
    report = LossReport(pos_term + alpha * ori_term, pos_term, ori_term, float(alpha))
    return report, dpos, dori


class GnnModel:
    """Three graph convolutions followed by a 3-d position and 4-d quaternion head."""

    def __init__(self, conv_type: str, mode: str, conv_layers, pos_head: LinearHead,
                 ori_head: LinearHead, activation: str = "relu"):
        if len(conv_layers) != 3:
            raise ValueError("GnnModel needs exactly 3 convolution layers")
        if pos_head.d_out != 3 or ori_head.d_out != 4:
            raise ShapeError("heads must output 3 and 4 values")
        self.conv_type = conv_type
        self.mode = mode
        self.conv_layers = list(conv_layers)
        self.pos_head = pos_head
        self.ori_head = ori_head
        self.activation = activation

    @classmethod
    def init(cls, d_feat: int, config: TrainConfig, rng: np.random.Generator | None = None) -> "GnnModel":
        if rng is None:
            rng = _seed_streams(config.seed)[0]
        layer_cls = WlLayer if config.conv_type == "wl" else GcnLayer
        dims = (d_feat,) + config.widths
        convs = [layer_cls.init(rng, dims[i], dims[i + 1]) for i in range(3)]
        if config.conv_type == "wl" and config.neighbor_init_scale != 1.0:
            for layer in convs:
                layer.theta2 *= config.neighbor_init_scale
        pos_head = LinearHead.init(rng, dims[-1], 3)
        ori_head = LinearHead.init(rng, dims[-1], 4)
        return cls(config.conv_type, config.mode, convs, pos_head, ori_head, config.activation)

    @property
    def d_feat(self) -> int:
        return self.conv_layers[0].d_in

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(layer.d_out for layer in self.conv_layers)

    def modules(self):
        return [*self.conv_layers, self.pos_head, self.ori_head]

    def named_parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for idx, mod in enumerate(self.modules()):
            prefix = f"conv{idx}" if idx < 3 else ("pos_head" if idx == 3 else "ori_head")
            for name in mod.param_names:
                out.append((f"{prefix}.{name}", getattr(mod, name), getattr(mod, "grad_" + name)))
        return out

    def zero_grad(self) -> None:
        for mod in self.modules():
            mod.zero_grad()

    def _embed(self, g: Graph, x, cache):
        h = as_matrix(x, "x")
        if h.shape[1] != self.d_feat:
            raise ShapeError(f"model expects {self.d_feat} feature columns, got {h.shape[1]}")
        for idx, layer in enumerate(self.conv_layers):
            c = {} if cache is not None else None
            z = conv_forward(layer, g, h, c)
            if idx < 2 and self.activation == "relu":
                if c is not None:
                    c["pre"] = z
                z = np.maximum(z, 0.0)
            if cache is not None:
                cache["conv"].append(c)
            h = z
        return h

    def forward(self, g: Graph, x, cache: dict | None = None):
        """Per-node (node_pose) or per-graph (graph_pose) predictions for one graph."""
        if cache is not None:
            cache.clear()
            cache.update(conv=[], graph=g)
        h = self._embed(g, x, cache)
        if self.mode == GRAPH_POSE:
            if cache is not None:
                cache["n"] = h.shape[0]
            h = mean_readout(h).reshape(1, -1)
        hp = {} if cache is not None else None
        ho = {} if cache is not None else None
        pos = head_forward(self.pos_head, h, hp)
        ori = head_forward(self.ori_head, h, ho)
        if cache is not None:
            cache["pos_head"], cache["ori_head"] = hp, ho
        return pos, ori

    def backward(self, cache: dict | None, dpos, dori) -> np.ndarray:
        """Accumulate parameter gradients into the grad buffers; return d loss / d x."""
        if not cache or "conv" not in cache or len(cache["conv"]) != 3:
            raise StateError("backward called without a forward cache")
        g = cache["graph"]
        grads, dh_p = head_backward(self.pos_head, cache["pos_head"], np.asarray(dpos, dtype=np.float64))
        _accumulate(self.pos_head, grads)
        grads, dh_o = head_backward(self.ori_head, cache["ori_head"], np.asarray(dori, dtype=np.float64))
        _accumulate(self.ori_head, grads)
        dh = dh_p + dh_o
        if self.mode == GRAPH_POSE:
            dh = mean_readout_backward(cache["n"], dh)
        for idx in (2, 1, 0):
            c = cache["conv"][idx]
            if "pre" in c:
                dh = relu_backward(c["pre"], dh)
            grads, dh = conv_backward(self.conv_layers[idx], g, c, dh)
            _accumulate(self.conv_layers[idx], grads)
        return dh


def _accumulate(mod, grads: dict) -> None:
    for name, value in grads.items():
        getattr(mod, "grad_" + name)[...] += value


def _seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, shuffle_ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF).spawn(2)
    return (np.random.Generator(np.random.PCG64(init_ss)),
            np.random.Generator(np.random.PCG64(shuffle_ss)))


def forward_node_pose(model: GnnModel, g: Graph, x=None):
    if model.mode != NODE_POSE:
        raise ValueError("forward_node_pose requires a node_pose model")
    return model.forward(g, g.node_features if x is None else x)


def forward_graph_pose(model: GnnModel, graphs: Sequence[Graph]):
    if model.mode != GRAPH_POSE:
        raise ValueError("forward_graph_pose requires a graph_pose model")
    if len(graphs) == 0:
        raise ValueError("empty graph list")
    outs = [model.forward(g, g.node_features) for g in graphs]
    return np.vstack([o[0] for o in outs]), np.vstack([o[1] for o in outs])


@dataclass
class TrainResult:
    model: GnnModel
    history: list[LossReport] = field(default_factory=list)
    final: LossReport | None = None


class _Optimizer:
    """Gradient descent with optional heavy-ball momentum, or Adam."""

    def __init__(self, model: GnnModel, config: TrainConfig):
        self.params = [(p, gr) for _, p, gr in model.named_parameters()]
        self.lr = config.learning_rate
        self.momentum = config.momentum
        self.adam = config.optimizer == "adam"
        self.t = 0
        self.velocity = None
        if self.adam:
            self.m1 = [np.zeros_like(p) for p, _ in self.params]
            self.m2 = [np.zeros_like(p) for p, _ in self.params]
        elif self.momentum:
            self.velocity = [np.zeros_like(p) for p, _ in self.params]

    def step(self) -> None:
        if self.adam:
            self._adam_step()
            return
        for i, (p, gr) in enumerate(self.params):
            if self.velocity is not None:
                v = self.velocity[i]
                v *= self.momentum
                v += gr
                p -= self.lr * v
            else:
                p -= self.lr * gr

    def _adam_step(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.t += 1
        step = self.lr / (1.0 - beta1 ** self.t)
        inv_c2 = 1.0 / np.sqrt(1.0 - beta2 ** self.t)
        for (p, gr), m1, m2 in zip(self.params, self.m1, self.m2):
            m1 *= beta1
            m1 += (1.0 - beta1) * gr
            m2 *= beta2
            m2 += (1.0 - beta2) * (gr * gr)
            denom = np.sqrt(m2)
            denom *= inv_c2
            denom += eps
            p -= step * (m1 / denom)


def _check_finite(report: LossReport, epoch: int, lr: float) -> None:
    if not np.isfinite(report.total):
        raise DivergenceError(epoch, lr)


def train_node_pose(features, poses: Sequence[Pose], config: TrainConfig,
                    model: GnnModel | None = None,
                    on_epoch: Callable[[int, LossReport], None] | None = None) -> TrainResult:
    """Transductive full-batch training on the k-NN graph of all training rows."""
    x = np.ascontiguousarray(as_matrix(features, "features"))
    truth = poses_to_arrays(poses)
    g = knn_graph(x, config.k)
    if model is None:
        model = GnnModel.init(x.shape[1], replace(config, mode=NODE_POSE))
    opt = _Optimizer(model, config)
    result = TrainResult(model)
    cache: dict = {}
    for epoch in range(config.epochs):
        model.zero_grad()
        pos, ori = model.forward(g, x, cache)
        report, dpos, dori = pose_loss_grad(pos, ori, truth, config.alpha)
        _check_finite(report, epoch, config.learning_rate)
        result.history.append(report)
        if on_epoch:
            on_epoch(epoch, report)
        model.backward(cache, dpos, dori)
        opt.step()
    pos, ori = model.forward(g, x)
    result.final = pose_loss(pos, ori, truth, config.alpha)
    _check_finite(result.final, config.epochs, config.learning_rate)
    return result


def train_graph_pose(graphs: Sequence[Graph], poses: Sequence[Pose], config: TrainConfig,
                     model: GnnModel | None = None,
                     on_epoch: Callable[[int, LossReport], None] | None = None) -> TrainResult:
    """Mini-batch gradient descent over image graphs in a seeded shuffled order.

    Each epoch's history entry is the loss over all graphs before that
    epoch's updates.
    """
    if len(graphs) == 0:
        raise ValueError("empty graph list")
    if len(graphs) != len(poses):
        raise ValueError("graphs and poses differ in length")
    tp, tq = poses_to_arrays(poses)
    init_rng, shuffle_rng = _seed_streams(config.seed)
    if model is None:
        model = GnnModel.init(graphs[0].node_features.shape[1], replace(config, mode=GRAPH_POSE), init_rng)
    opt = _Optimizer(model, config)
    result = TrainResult(model)
    caches = [dict() for _ in range(config.batch_size)]
    for epoch in range(config.epochs):
        pos, ori = forward_graph_pose(model, graphs)
        report = pose_loss(pos, ori, (tp, tq), config.alpha)
        _check_finite(report, epoch, config.learning_rate)
        result.history.append(report)
        if on_epoch:
            on_epoch(epoch, report)
        order = shuffle_rng.permutation(len(graphs))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            model.zero_grad()
            outs = [model.forward(graphs[i], graphs[i].node_features, caches[b]) for b, i in enumerate(batch)]
            bp = np.vstack([o[0] for o in outs])
            bo = np.vstack([o[1] for o in outs])
            _, dpos, dori = pose_loss_grad(bp, bo, (tp[batch], tq[batch]), config.alpha)
            # fixed accumulation order keeps runs bit-identical
            for b in range(len(batch)):
                model.backward(caches[b], dpos[b:b + 1], dori[b:b + 1])
            opt.step()
    pos, ori = forward_graph_pose(model, graphs)
    result.final = pose_loss(pos, ori, (tp, tq), config.alpha)
    _check_finite(result.final, config.epochs, config.learning_rate)
    return result


def train(model: GnnModel | None, data, config: TrainConfig, **kwargs) -> TrainResult:
    """Dispatch on ``config.mode``; ``data`` is ``(features, poses)`` or ``(graphs, poses)``."""
    inputs, poses = data
    if config.mode == NODE_POSE:
        return train_node_pose(inputs, poses, config, model=model, **kwargs)
    return train_graph_pose(inputs, poses, config, model=model, **kwargs)


def _to_poses(pos: np.ndarray, ori: np.ndarray) -> list[Pose]:
    return [Pose.from_arrays(p, quat_normalize(q)) for p, q in zip(pos, ori)]


def infer_node_pose(model: GnnModel, train_features, test_features, k: int) -> list[Pose]:
    """Predict test poses from a graph of test rows and their nearest train rows.

    Only features are consumed; test labels never enter this path.
    """
    stitched = stitch_test_graph(train_features, test_features, k)
    pos, ori = forward_node_pose(model, stitched.graph)
    test = stitched.test_nodes
    return _to_poses(pos[test], ori[test])


def infer_graph_pose(model: GnnModel, graphs: Sequence[Graph]) -> list[Pose]:
    pos, ori = forward_graph_pose(model, graphs)
    return _to_poses(pos, ori)


def evaluate(predictions: Sequence[Pose], truths: Sequence[Pose]) -> tuple[float, float]:
    """Median position error (m) and median orientation error (deg)."""
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions for {len(truths)} truths")
    if not predictions:
        raise ValueError("nothing to evaluate")
    pos = [position_error(a, b) for a, b in zip(predictions, truths)]
    ori = [orientation_error(a, b) for a, b in zip(predictions, truths)]
    return median(pos), median(ori)
