"""Toy pre-LN transformer classifier with LoRA adapters on Wq and Wv.

The base weights are frozen; only the adapters and the classification head
train.  The model can be cut after any number of blocks: the client side
owns the embeddings plus blocks ``[0, cut)``, the server side owns blocks
``[cut, L)`` plus pooling and the head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError, DimensionError, SplitMismatchError, ValidationError

TARGETS = ("q", "v")
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 4
    hidden: int = 32
    num_heads: int = 4
    ffn_mult: int = 4
    vocab: int = 64
    seq_len: int = 16
    num_classes: int = 4
    lora_rank: int = 4
    lora_alpha: float = 8.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v > 0:
                raise ValidationError(f"ModelConfig.{f.name} must be positive, got {v!r}")
        if self.hidden % self.num_heads:
            raise ValidationError(
                f"hidden ({self.hidden}) must be divisible by num_heads ({self.num_heads})")
        if self.lora_rank > self.hidden:
            raise ValidationError(f"lora_rank ({self.lora_rank}) exceeds hidden ({self.hidden})")

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        """BERT-base shape used by the cost model (6 CARER emotion classes)."""
        return cls(num_blocks=12, hidden=768, num_heads=12, ffn_mult=4, vocab=30522,
                   seq_len=128, num_classes=6, lora_rank=16, lora_alpha=32.0)

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.lora_rank

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class Partition:
    """Number of transformer blocks executed on the client."""

    cut: int
    num_blocks: int

    def __post_init__(self):
        if not 0 <= self.cut <= self.num_blocks:
            raise ValidationError(f"cut {self.cut} outside [0, {self.num_blocks}]")

    @property
    def client_blocks(self) -> range:
        return range(0, self.cut)

    @property
    def server_blocks(self) -> range:
        return range(self.cut, self.num_blocks)

    def owner(self, block: int) -> str:
        return "client" if block < self.cut else "server"


# --------------------------------------------------------------------------
# Weights
# --------------------------------------------------------------------------


@dataclass
class BlockWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class BaseWeights:
    """Frozen pre-trained weights.

    A client-side view keeps the embeddings but only the first ``cut``
    entries of ``blocks``; block indices stay global.
    """

    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    blocks: dict[int, BlockWeights]

    def tensors(self) -> list[Tensor]:
        out = [self.tok_emb, self.pos_emb]
        for i in sorted(self.blocks):
            out.extend(self.blocks[i].tensors())
        return out

    def client_view(self, cut: int) -> "BaseWeights":
        Partition(cut, self.config.num_blocks)
        return BaseWeights(self.config, self.tok_emb, self.pos_emb,
                           {i: self.blocks[i] for i in range(cut)})

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors())


@dataclass
class LoraAdapter:
    """Low-rank update ``scaling * (B @ A)^T`` added to an H x H weight."""

    block: int
    target: str
    A: Tensor  # r x H
    B: Tensor  # H x r
    scaling: float

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data).T


@dataclass
class AdapterSet:
    """Trainable state: adapters keyed by ``(block, target)`` plus the head.

    Fragments (client- or server-side) hold a subset of the keys; the head is
    only ever on the server side.
    """

    num_blocks: int
    adapters: dict[tuple[int, str], LoraAdapter] = field(default_factory=dict)
    head_weight: Tensor | None = None
    head_bias: Tensor | None = None

    @property
    def has_head(self) -> bool:
        return self.head_weight is not None

    def blocks(self) -> list[int]:
        return sorted({b for b, _ in self.adapters})

    def get(self, block: int, target: str) -> LoraAdapter | None:
        return self.adapters.get((block, target))

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for (b, t) in sorted(self.adapters):
            a = self.adapters[(b, t)]
            out[f"blocks.{b}.{t}.A"] = a.A
            out[f"blocks.{b}.{t}.B"] = a.B
        if self.has_head:
            out["head.weight"] = self.head_weight
            out["head.bias"] = self.head_bias
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def subset(self, blocks, head: bool) -> "AdapterSet":
        keep = set(blocks)
        return AdapterSet(
            self.num_blocks,
            {k: a for k, a in self.adapters.items() if k[0] in keep},
            self.head_weight if head else None,
            self.head_bias if head else None,
        )

    def client_side(self, partition: Partition) -> "AdapterSet":
        return self.subset(partition.client_blocks, head=False)

    def server_side(self, partition: Partition) -> "AdapterSet":
        return self.subset(partition.server_blocks, head=True)

    def with_values(self, values: dict[str, np.ndarray]) -> "AdapterSet":
        """Copy with every named tensor replaced by a fresh trainable tensor."""
        names = set(self.named_tensors())
        if set(values) != names:
            missing = sorted(names - set(values))
            extra = sorted(set(values) - names)
            raise ContractError(f"value set misaligned: missing={missing} extra={extra}")

        def fresh(name):
            return Tensor(values[name], requires_grad=True, name=name)

        adapters = {
            (b, t): LoraAdapter(b, t, fresh(f"blocks.{b}.{t}.A"), fresh(f"blocks.{b}.{t}.B"), a.scaling)
            for (b, t), a in self.adapters.items()
        }
        if self.has_head:
            return AdapterSet(self.num_blocks, adapters, fresh("head.weight"), fresh("head.bias"))
        return AdapterSet(self.num_blocks, adapters)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named_tensors().items()}

    def equals(self, other: "AdapterSet") -> bool:
        """Bit-exact structural and value equality."""
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def build_model(config: ModelConfig, seed: int) -> tuple[BaseWeights, AdapterSet]:
    """Deterministically initialise frozen base weights and a fresh adapter set.

    Embeddings are N(0, 1); block matrices use N(0, 1/fan_in); layer norms
    start at identity.  LoRA A and the head are N(0, 0.02^2); B and the head
    bias are zero, so the adapters contribute nothing at initialisation.
    """
    if not isinstance(config, ModelConfig):
        raise ValidationError("config must be a ModelConfig")
    rng = np.random.default_rng(seed)
    H, F, L = config.hidden, config.ffn_mult * config.hidden, config.num_blocks

    def frozen(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape))

    tok = frozen((config.vocab, H), 1.0)
    pos = frozen((config.seq_len, H), 1.0)
    blocks = {}
    for i in range(L):
        blocks[i] = BlockWeights(
            wq=frozen((H, H), 1 / math.sqrt(H)),
            wk=frozen((H, H), 1 / math.sqrt(H)),
            wv=frozen((H, H), 1 / math.sqrt(H)),
            wo=frozen((H, H), 1 / math.sqrt(H)),
            w1=frozen((H, F), 1 / math.sqrt(H)),
            w2=frozen((F, H), 1 / math.sqrt(F)),
            ln1_gamma=Tensor(np.ones(H)), ln1_beta=Tensor(np.zeros(H)),
            ln2_gamma=Tensor(np.ones(H)), ln2_beta=Tensor(np.zeros(H)),
        )
    base = BaseWeights(config, tok, pos, blocks)

    r, s = config.lora_rank, config.scaling
    adapters = {}
    for i in range(L):
        for t in TARGETS:
            A = Tensor(rng.normal(0.0, 0.02, size=(r, H)), requires_grad=True, name=f"blocks.{i}.{t}.A")
            B = Tensor(np.zeros((H, r)), requires_grad=True, name=f"blocks.{i}.{t}.B")
            adapters[(i, t)] = LoraAdapter(i, t, A, B, s)
    head_w = Tensor(rng.normal(0.0, 0.02, size=(H, config.num_classes)), requires_grad=True,
                    name="head.weight")
    head_b = Tensor(np.zeros(config.num_classes), requires_grad=True, name="head.bias")
    return base, AdapterSet(L, adapters, head_w, head_b)


def merge_adapters(base: BaseWeights, adapters: AdapterSet) -> BaseWeights:
    """Fold every adapter into its base weight: ``W + scaling * (B A)^T``."""
    blocks = {}
    for i, bw in base.blocks.items():
        kw = {}
        for t in TARGETS:
            a = adapters.get(i, t)
            w = getattr(bw, f"w{t}")
            kw[f"w{t}"] = Tensor(w.data + a.delta()) if a is not None else w
        blocks[i] = replace(bw, **kw)
    return BaseWeights(base.config, base.tok_emb, base.pos_emb, blocks)


# --------------------------------------------------------------------------
# Forward passes
# --------------------------------------------------------------------------


def _lora_linear(x: Tensor, w: Tensor, adapter: LoraAdapter | None) -> Tensor:
    y = ad.matmul(x, w)
    if adapter is None:
        return y
    low = ad.matmul(ad.matmul(x, ad.transpose(adapter.A)), ad.transpose(adapter.B))
    return ad.add(y, ad.scale(low, adapter.scaling))


def _block(x: Tensor, bw: BlockWeights, adapters: AdapterSet, i: int,
           cfg: ModelConfig, batch: int) -> Tensor:
    """One pre-LN block on a (B*S, H) activation."""
    S, H, nh = cfg.seq_len, cfg.hidden, cfg.num_heads
    d = H // nh

    def heads(t):  # (B*S, H) -> (B*nh, S, d)
        t = ad.reshape(t, (batch, S, nh, d))
        return ad.reshape(ad.transpose(t, (0, 2, 1, 3)), (batch * nh, S, d))

    h = ad.layer_norm(x, bw.ln1_gamma, bw.ln1_beta, LN_EPS)
    q = heads(_lora_linear(h, bw.wq, adapters.get(i, "q")))
    k = heads(ad.matmul(h, bw.wk))
    v = heads(_lora_linear(h, bw.wv, adapters.get(i, "v")))
    scores = ad.scale(ad.bmm(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    ctx = ad.bmm(ad.softmax(scores), v)
    ctx = ad.reshape(ad.transpose(ad.reshape(ctx, (batch, nh, S, d)), (0, 2, 1, 3)), (batch * S, H))
    x = ad.add(x, ad.matmul(ctx, bw.wo))

    h = ad.layer_norm(x, bw.ln2_gamma, bw.ln2_beta, LN_EPS)
    return ad.add(x, ad.matmul(ad.gelu(ad.matmul(h, bw.w1)), bw.w2))


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len:
        raise DimensionError(f"tokens must be (B, {cfg.seq_len}), got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValidationError(f"token ids must lie in [0, {cfg.vocab})")
    return tokens


def _check_labels(cfg: ModelConfig, labels, batch: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise DimensionError(f"labels must have shape ({batch},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes):
        raise ValidationError(f"labels must lie in [0, {cfg.num_classes})")
    return labels


def _embed(base: BaseWeights, tokens: np.ndarray) -> Tensor:
    cfg = base.config
    b = tokens.shape[0]
    positions = np.broadcast_to(np.arange(cfg.seq_len), tokens.shape)
    x = ad.add(ad.embedding(base.tok_emb, tokens), ad.embedding(base.pos_emb, positions))
    return ad.reshape(x, (b * cfg.seq_len, cfg.hidden))


def _run_blocks(x: Tensor, base: BaseWeights, adapters: AdapterSet, blocks: range, batch: int) -> Tensor:
    for i in blocks:
        if i not in base.blocks:
            raise ContractError(f"base weights do not hold block {i}")
        x = _block(x, base.blocks[i], adapters, i, base.config, batch)
    return x


def _head(x: Tensor, adapters: AdapterSet, cfg: ModelConfig, batch: int) -> Tensor:
    if not adapters.has_head:
        raise ContractError("adapter set has no classifier head")
    pooled = ad.mean(ad.reshape(x, (batch, cfg.seq_len, cfg.hidden)), axis=1)
    return ad.add_bias(ad.matmul(pooled, adapters.head_weight), adapters.head_bias)


@dataclass
class ClientPass:
    activation: Tensor
    tape: Tape
    partition: Partition


@dataclass
class ServerPass:
    loss: Tensor
    logits: Tensor
    tape: Tape
    boundary: Tensor
    adapters: AdapterSet


def forward_client(base: BaseWeights, adapters: AdapterSet, partition: Partition, tokens) -> ClientPass:
    """Embedding plus blocks ``[0, cut)``; returns the B x S x H boundary activation."""
    cfg = base.config
    tokens = _check_tokens(cfg, tokens)
    b = tokens.shape[0]
    with Tape() as tape:
        x = _run_blocks(_embed(base, tokens), base, adapters, partition.client_blocks, b)
        act = ad.reshape(x, (b, cfg.seq_len, cfg.hidden))
    return ClientPass(act, tape, partition)


def forward_server(base: BaseWeights, adapters: AdapterSet, partition: Partition,
                   activation: Tensor | np.ndarray, labels) -> ServerPass:
    """Blocks ``[cut, L)``, mean pooling, head and cross-entropy.

    The activation is re-entered as a fresh trainable leaf so the gradient at
    the cut can be read off the server tape.
    """
    cfg = base.config
    data = activation.data if isinstance(activation, Tensor) else np.asarray(activation, dtype=np.float64)
    if data.ndim != 3 or data.shape[1:] != (cfg.seq_len, cfg.hidden):
        raise SplitMismatchError(
            f"activation of shape {data.shape} does not fit cut {partition.cut} "
            f"(expected (B, {cfg.seq_len}, {cfg.hidden}))")
    b = data.shape[0]
    labels = _check_labels(cfg, labels, b)
    boundary = Tensor(data, requires_grad=True, name="boundary")
    with Tape() as tape:
        x = ad.reshape(boundary, (b * cfg.seq_len, cfg.hidden))
        x = _run_blocks(x, base, adapters, partition.server_blocks, b)
        logits = _head(x, adapters, cfg, b)
        loss = ad.softmax_cross_entropy(logits, labels)
    return ServerPass(loss, logits, tape, boundary, adapters)


def _named_grads(adapters: AdapterSet, raw: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: raw[t] if t in raw else np.zeros_like(t.data)
            for name, t in adapters.named_tensors().items()}


def backward_boundary(server_pass: ServerPass | None) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradient of the loss w.r.t. the cut activation, plus server-side adapter grads."""
    if server_pass is None or not server_pass.tape.produced(server_pass.loss):
        raise ContractError("backward_boundary called before forward_server")
    sp = server_pass
    raw = ad.backward(sp.tape, sp.loss, wrt=[sp.boundary, *sp.adapters.named_tensors().values()])
    return raw[sp.boundary], _named_grads(sp.adapters, raw)


def backward_client(client_pass: ClientPass | None, adapters: AdapterSet,
                    grad: np.ndarray) -> dict[str, np.ndarray]:
    """Resume the backward pass on the client tape from the cut gradient."""
    if client_pass is None:
        raise ContractError("no client tape retained")
    act = client_pass.activation
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != act.shape:
        raise DimensionError(f"gradient {grad.shape} does not match activation {act.shape}")
    if not client_pass.tape.produced(act):
        # cut == 0 with no ops recorded cannot happen (embedding always runs)
        raise ContractError("activation was not produced on the client tape")
    raw = ad.backward(client_pass.tape, act, grad=grad, wrt=adapters.named_tensors().values())
    return _named_grads(adapters, raw)


def forward_full(base: BaseWeights, adapters: AdapterSet, tokens, labels) -> ServerPass:
    """Monolithic forward on a single tape (the reference for split runs)."""
    cfg = base.config
    tokens = _check_tokens(cfg, tokens)
    b = tokens.shape[0]
    labels = _check_labels(cfg, labels, b)
    with Tape() as tape:
        x = _run_blocks(_embed(base, tokens), base, adapters, range(cfg.num_blocks), b)
        logits = _head(x, adapters, cfg, b)
        loss = ad.softmax_cross_entropy(logits, labels)
    return ServerPass(loss, logits, tape, None, adapters)


def full_gradients(base: BaseWeights, adapters: AdapterSet, tokens, labels) -> tuple[float, dict[str, np.ndarray]]:
    sp = forward_full(base, adapters, tokens, labels)
    raw = ad.backward(sp.tape, sp.loss, wrt=adapters.named_tensors().values())
    return sp.loss.item(), _named_grads(adapters, raw)


def predict_logits(base: BaseWeights, adapters: AdapterSet, tokens) -> np.ndarray:
    """Inference-only forward (no tape)."""
    cfg = base.config
    tokens = _check_tokens(cfg, tokens)
    b = tokens.shape[0]
    x = _run_blocks(_embed(base, tokens), base, adapters, range(cfg.num_blocks), b)
    return _head(x, adapters, cfg, b).data


def evaluate(base: BaseWeights, adapters: AdapterSet, tokens, labels) -> tuple[float, float]:
    """Mean cross-entropy and accuracy on a labelled set."""
    logits = predict_logits(base, adapters, tokens)
    labels = np.asarray(labels, dtype=np.int64)
    loss = ad.softmax_cross_entropy(Tensor._wrap(logits, False), labels).item()
    acc = float((logits.argmax(axis=1) == labels).mean())
    return loss, acc


def sgd_step(adapters: AdapterSet, grads: dict[str, np.ndarray], lr: float) -> AdapterSet:
    """Plain SGD: ``theta - lr * g`` for every trainable tensor in ``adapters``."""
    named = adapters.named_tensors()
    if set(grads) != set(named):
        missing = sorted(set(named) - set(grads))
        extra = sorted(set(grads) - set(named))
        raise ContractError(f"gradients misaligned with trainable set: missing={missing} extra={extra}")
    new = {}
    for name, t in named.items():
        g = np.asarray(grads[name])
        if g.shape != t.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {t.shape}")
        new[name] = t.data - lr * g
    return adapters.with_values(new)
