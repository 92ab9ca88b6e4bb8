"""Point network with two parallel decoders, per-level prediction heads,
losses and the SGD training loop.

The encoder is a per-point MLP whose output is concatenated with a global
max-pooled context code. Two decoders split the encoding into a semantic and
an instance trunk; per-level branches derive level features, from which
two-layer heads predict class probabilities and the two offset fields
(instance center and semantic region center). When fusion is enabled the
offset heads consume the fused feature instead of the raw level feature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import fusion as fu
from .autodiff import Graph, Node
from .shapes import AugmentParams, LabeledShape, augment
from .tuning import tune_allocator

FUSION_MODES = ("none", "single", "multi", "cross")

CHECKPOINT_MAGIC = "PFNET 1"


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration


@dataclass
class ModelConfig:
    feature_dim: int = 64
    class_counts: tuple[int, ...] = (2, 2, 3)
    encoder_widths: tuple[int, int] = (64, 64)
    head_hidden: int = 32
    fusion: str = "cross"
    one_hot: bool = False
    stop_grad: bool = True
    two_dir: bool = False
    learning_rate: float = 0.1
    iterations: int = 2000
    decay_factor: float = 0.1
    batch_size: int = 8
    seed: int = 0
    log_every: int = 100

    @property
    def n_levels(self) -> int:
        return len(self.class_counts)

    def fused_dim(self) -> int:
        l = self.feature_dim
        if self.fusion == "none":
            return l
        if self.fusion in ("single", "multi"):
            return 2 * l + 3
        return self.n_levels * l + l + 3

    def validate(self) -> "ModelConfig":
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")
        if self.feature_dim < 1 or self.head_hidden < 1:
            raise ValueError("feature_dim and head_hidden must be positive")
        if any(c < 1 for c in self.class_counts) or not self.class_counts:
            raise ValueError("class_counts must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.iterations:
            m1, m2 = self.decay_milestones()
            if not (0 < m1 < m2 < self.iterations):
                raise ValueError(
                    "decay milestones must be strictly increasing within "
                    f"(0, {self.iterations}); use at least 4 iterations"
                )
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        return self

    def decay_milestones(self) -> tuple[int, int]:
        return self.iterations // 2, (3 * self.iterations) // 4

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        data = json.loads(text)
        data["class_counts"] = tuple(data["class_counts"])
        data["encoder_widths"] = tuple(data["encoder_widths"])
        return cls(**data)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    w1, w2 = config.encoder_widths
    l = config.feature_dim
    hh = config.head_hidden
    fused = config.fused_dim()
    shapes: list[tuple[str, tuple[int, int]]] = [
        ("enc1_w", (3, w1)), ("enc1_b", (1, w1)),
        ("enc2_w", (w1, w2)), ("enc2_b", (1, w2)),
        ("dsem_w", (2 * w2, l)), ("dsem_b", (1, l)),
        ("dins_w", (2 * w2, l)), ("dins_b", (1, l)),
    ]
    if config.two_dir:
        shapes += [("twodir_w", (l, l)), ("twodir_b", (1, l))]
    for k, c in enumerate(config.class_counts, start=1):
        shapes += [
            (f"sem_branch_w{k}", (l, l)), (f"sem_branch_b{k}", (1, l)),
            (f"sem_out_w{k}", (l, c)), (f"sem_out_b{k}", (1, c)),
            (f"ins_branch_w{k}", (l, l)), (f"ins_branch_b{k}", (1, l)),
            (f"oi_hidden_w{k}", (fused, hh)), (f"oi_hidden_b{k}", (1, hh)),
            (f"oi_out_w{k}", (hh, 3)), (f"oi_out_b{k}", (1, 3)),
            (f"os_hidden_w{k}", (fused, hh)), (f"os_hidden_b{k}", (1, hh)),
            (f"os_out_w{k}", (hh, 3)), (f"os_out_b{k}", (1, 3)),
        ]
    return shapes


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases."""
    config.validate()
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(np.random.SeedSequence([0x1817, seed & 0xFFFFFFFF]))
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config):
        if name.rsplit("_", 1)[1].startswith("b"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------------------
# Forward graph
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutputs:
    """Graph nodes of one shape's forward pass (values on ``.value``)."""

    graph: Graph
    param_nodes: dict[str, Node]
    positions: Node
    f_sem: list[Node]
    f_ins: list[Node]
    p_sem: list[Node]
    o_i: list[Node]
    o_s: list[Node]

    def p_sem_values(self) -> list[np.ndarray]:
        return [n.value for n in self.p_sem]

    def o_i_values(self) -> list[np.ndarray]:
        return [n.value for n in self.o_i]

    def o_s_values(self) -> list[np.ndarray]:
        return [n.value for n in self.o_s]


def _linear(x: Node, params: dict[str, Node], stem: str, level: int | None = None) -> Node:
    suffix = "" if level is None else str(level)
    # The matmul product has no other consumer, so the bias adds in place.
    return ad.add(ad.matmul(x, params[f"{stem}_w{suffix}"]),
                  params[f"{stem}_b{suffix}"], _inplace=True)


def _linear_relu(x: Node, params: dict[str, Node], stem: str,
                 level: int | None = None) -> Node:
    return ad.relu(_linear(x, params, stem, level), _inplace=True)


def make_param_nodes(graph: Graph, params: dict[str, np.ndarray]) -> dict[str, Node]:
    return {name: graph.leaf(value, name) for name, value in params.items()}


def build_forward(graph: Graph, param_nodes: dict[str, Node],
                  points: np.ndarray, config: ModelConfig) -> ForwardOutputs:
    """Append one shape's forward pass to an existing graph."""
    n = points.shape[0]
    pos = graph.constant(points, "positions")
    h1 = _linear_relu(pos, param_nodes, "enc1")
    h2 = _linear_relu(h1, param_nodes, "enc2")
    ctx = ad.repeat_rows(ad.col_max(h2), n)
    enc = ad.concat_cols([h2, ctx])
    sem_trunk = _linear_relu(enc, param_nodes, "dsem")
    ins_trunk = _linear_relu(enc, param_nodes, "dins")
    if config.two_dir:
        ins_trunk = ad.add(ins_trunk, _linear(sem_trunk, param_nodes, "twodir"))

    f_sem, f_ins, p_sem = [], [], []
    for k in range(1, config.n_levels + 1):
        fs = _linear_relu(sem_trunk, param_nodes, "sem_branch", k)
        f_sem.append(fs)
        logits = _linear(fs, param_nodes, "sem_out", k)
        p_sem.append(ad.row_softmax(logits))
        f_ins.append(_linear_relu(ins_trunk, param_nodes, "ins_branch", k))

    fusion_probs = [fu.one_hot_projection(p) if config.one_hot else p for p in p_sem]
    if config.fusion == "none":
        head_in = list(f_ins)
    elif config.fusion in ("single", "multi"):
        head_in = [
            fu.fuse_single_level(p, f, pos, stop_grad=config.stop_grad)
            for p, f in zip(fusion_probs, f_ins)
        ]
    else:
        head_in = fu.fuse_cross_level(fusion_probs, f_ins, pos,
                                      stop_grad=config.stop_grad)

    o_i, o_s = [], []
    for k, g in enumerate(head_in, start=1):
        hi = _linear_relu(g, param_nodes, "oi_hidden", k)
        o_i.append(_linear(hi, param_nodes, "oi_out", k))
        hs = _linear_relu(g, param_nodes, "os_hidden", k)
        o_s.append(_linear(hs, param_nodes, "os_out", k))

    return ForwardOutputs(graph, param_nodes, pos, f_sem, f_ins, p_sem, o_i, o_s)


def forward(params: dict[str, np.ndarray], points: np.ndarray,
            config: ModelConfig) -> ForwardOutputs:
    """Run the network on one shape with a fresh graph."""
    config.validate()
    graph = Graph()
    return build_forward(graph, make_param_nodes(graph, params), points, config)


# ---------------------------------------------------------------------------
# Losses (plain values and graph nodes)
# ---------------------------------------------------------------------------


def loss_semantic(p_sem: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy against 1-based labels, probabilities clamped to
    [1e-12, 1]."""
    p = np.asarray(p_sem, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    if lab.min() < 1 or lab.max() > p.shape[1]:
        raise ValueError(f"labels must lie in 1..{p.shape[1]}")
    picked = p[np.arange(p.shape[0]), lab - 1]
    return float(-np.mean(np.log(np.maximum(picked, ad.EPS_CLAMP))))


def loss_offset(o: np.ndarray, o_gt: np.ndarray) -> float:
    """Mean Euclidean norm of per-point offset errors."""
    o = np.asarray(o, dtype=np.float64)
    o_gt = np.asarray(o_gt, dtype=np.float64)
    if o.shape != o_gt.shape or o.shape[1] != 3:
        raise ValueError("offset arrays must both be N x 3")
    return float(np.mean(np.linalg.norm(o - o_gt, axis=1)))


def _onehot_rows(labels: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], c))
    out[np.arange(labels.shape[0]), labels - 1] = 1.0
    return out


def loss_semantic_node(p_sem: Node, labels: np.ndarray, c: int) -> Node:
    graph = p_sem.graph
    mask = graph.constant(_onehot_rows(np.asarray(labels, dtype=np.int64), c), "labels")
    picked = ad.mul(mask, ad.log(p_sem))
    return ad.scale(ad.sum_all(picked), -1.0 / p_sem.value.shape[0])


def loss_offset_node(o: Node, o_gt: np.ndarray) -> Node:
    graph = o.graph
    target = graph.constant(o_gt, "gt_offset")
    diff = ad.sub(o, target)
    norms = ad.sqrt(ad.row_sum(ad.mul(diff, diff)))
    return ad.mean_all(norms)


def total_loss_node(outputs: ForwardOutputs, shape: LabeledShape) -> Node:
    """Sum over levels of semantic CE plus both offset losses (unit weights)."""
    if shape.n_levels != len(outputs.p_sem):
        raise ValueError(
            f"shape has {shape.n_levels} levels, model outputs {len(outputs.p_sem)}"
        )
    terms = []
    for k, lv in enumerate(shape.levels):
        terms.append(loss_semantic_node(outputs.p_sem[k], lv.sem,
                                        shape.class_counts[k]))
        terms.append(loss_offset_node(outputs.o_i[k], lv.inst_offset))
        terms.append(loss_offset_node(outputs.o_s[k], lv.region_offset))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


def total_loss(params: dict[str, np.ndarray], shape: LabeledShape,
               config: ModelConfig) -> float:
    out = forward(params, shape.points, config)
    return float(total_loss_node(out, shape).value[0, 0])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def lr_schedule(iteration: int, config: ModelConfig) -> float:
    """Base rate, decayed by ``decay_factor`` at 50% and 75% of the run."""
    if not 0 <= iteration < max(config.iterations, 1):
        raise ValueError(f"iteration {iteration} outside 0..{config.iterations - 1}")
    m1, m2 = config.decay_milestones()
    lr = config.learning_rate
    if iteration >= m1:
        lr *= config.decay_factor
    if iteration >= m2:
        lr *= config.decay_factor
    return lr


def train(dataset: list[LabeledShape], config: ModelConfig,
          augment_params: AugmentParams | None = None,
          ) -> tuple[dict[str, np.ndarray], list[tuple[int, float]]]:
    """Plain SGD over shuffled mini-batches; deterministic given config.seed.

    Returns the final parameters and a (iteration, batch loss) log sampled
    every ``config.log_every`` iterations.
    """
    config.validate()
    tune_allocator()
    if not dataset:
        raise ValueError("train: dataset is empty")
    for shape in dataset:
        if shape.n_levels != config.n_levels:
            raise ValueError("dataset level count does not match the model")
    params = init_params(config)
    if config.iterations == 0:
        return params, []
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([0x5A7F, config.seed & 0xFFFFFFFF])
    )
    order: list[int] = []
    log: list[tuple[int, float]] = []
    for it in range(config.iterations):
        while len(order) < config.batch_size:
            order.extend(shuffle_rng.permutation(len(dataset)).tolist())
        batch_idx = order[:config.batch_size]
        order = order[config.batch_size:]

        graph = Graph()
        param_nodes = make_param_nodes(graph, params)
        batch_terms = []
        for slot, idx in enumerate(batch_idx):
            shape = dataset[idx]
            if augment_params is not None:
                aug_seed = config.seed * 1_000_003 + it * config.batch_size + slot
                shape = augment(shape, augment_params, aug_seed)
            out = build_forward(graph, param_nodes, shape.points, config)
            batch_terms.append(total_loss_node(out, shape))
        acc = batch_terms[0]
        for t in batch_terms[1:]:
            acc = ad.add(acc, t)
        loss_node = ad.scale(acc, 1.0 / len(batch_terms))
        loss = float(loss_node.value[0, 0])
        if not np.isfinite(loss):
            raise DivergenceError(it)
        ad.backward(loss_node)
        lr = lr_schedule(it, config)
        for name, node in param_nodes.items():
            if node.grad is not None:
                params[name] = params[name] - lr * node.grad
            if not np.all(np.isfinite(params[name])):
                raise DivergenceError(it)
        # Break the graph<->node cycle so the iteration's arrays free promptly.
        graph.nodes.clear()
        if it % config.log_every == 0 or it == config.iterations - 1:
            log.append((it, loss))
    return params, log


def mean_offset_error(params: dict[str, np.ndarray], shapes: list[LabeledShape],
                      config: ModelConfig) -> float:
    """Instance-center offset error averaged over shapes and levels."""
    errors = []
    for shape in shapes:
        out = forward(params, shape.points, config)
        for k, lv in enumerate(shape.levels):
            errors.append(loss_offset(out.o_i[k].value, lv.inst_offset))
    return float(np.mean(errors))


def gradient_check(params: dict[str, np.ndarray], shape: LabeledShape,
                   config: ModelConfig, sample_fraction: float = 0.01,
                   step: float = 1e-6, abs_tol: float = 1e-6,
                   rel_tol: float = 1e-4, seed: int = 0):
    """Compare backward gradients of the total loss against central
    differences on a random sample of parameter entries.

    Run this with ``config.stop_grad`` off: stop-gradient passes values
    through unchanged, so finite differences measure the full derivative
    including the path that backward deliberately blocks.

    Returns (n_checked, n_failed, max_rel_err) where the relative error of a
    pair (a, b) is |a - b| / max(|a|, |b|) once |a - b| exceeds ``abs_tol``.
    """
    out = forward(params, shape.points, config)
    loss_node = total_loss_node(out, shape)
    ad.backward(loss_node)
    grads = {name: (node.grad if node.grad is not None else np.zeros_like(node.value))
             for name, node in out.param_nodes.items()}

    total_entries = sum(p.size for p in params.values())
    n_sample = max(1, int(round(sample_fraction * total_entries)))
    rng = np.random.default_rng(np.random.SeedSequence([0x6C4D, seed & 0xFFFFFFFF]))
    flat_choices = rng.choice(total_entries, size=n_sample, replace=False)

    names = list(params)
    bounds = np.cumsum([params[n].size for n in names])
    n_failed = 0
    max_rel = 0.0
    work = {name: arr.copy() for name, arr in params.items()}
    for flat in sorted(int(i) for i in flat_choices):
        slot = int(np.searchsorted(bounds, flat, side="right"))
        name = names[slot]
        local = flat - (bounds[slot - 1] if slot else 0)
        idx = np.unravel_index(local, params[name].shape)
        orig = work[name][idx]
        work[name][idx] = orig + step
        f_plus = total_loss(work, shape, config)
        work[name][idx] = orig - step
        f_minus = total_loss(work, shape, config)
        work[name][idx] = orig
        fd = (f_plus - f_minus) / (2.0 * step)
        bp = float(grads[name][idx])
        diff = abs(fd - bp)
        if diff > abs_tol:
            rel = diff / max(abs(fd), abs(bp))
            max_rel = max(max_rel, rel)
            if rel > rel_tol:
                n_failed += 1
    return n_sample, n_failed, max_rel


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    """Versioned binary blob: magic, config JSON, a textual line naming every
    parameter shape, then the flat little-endian float64 parameter data."""
    header = [
        CHECKPOINT_MAGIC,
        config.to_json(),
        "params " + " ".join(
            f"{name}:{arr.shape[0]}x{arr.shape[1]}" for name, arr in params.items()
        ),
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    head, _, rest = blob.partition(b"\n")
    if head.decode("utf-8") != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic {head!r})")
    cfg_line, _, rest = rest.partition(b"\n")
    config = ModelConfig.from_json(cfg_line.decode("utf-8"))
    shape_line, _, data = rest.partition(b"\n")
    tokens = shape_line.decode("utf-8").split()
    if not tokens or tokens[0] != "params":
        raise ValueError("checkpoint missing parameter shape header")
    params: dict[str, np.ndarray] = {}
    offset = 0
    for tok in tokens[1:]:
        name, _, dims = tok.partition(":")
        r_str, _, c_str = dims.partition("x")
        r, c = int(r_str), int(c_str)
        count = r * c
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        params[name] = arr.reshape(r, c).astype(np.float64)
        offset += count * 8
    if offset != len(data):
        raise ValueError("checkpoint has trailing or missing parameter data")
    return config, params
