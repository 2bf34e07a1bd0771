"""The MAC network: input unit, a chain of control/read/write cells, output unit.

All unit functions work on batches: vectors are [B x d], question words
[B x S x d] and the knowledge base is flattened to [B x (H*W) x d].
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import gridworld
from .nn import EMBED_DIM, BiLstm, DropoutMask, Embedding, Linear, Module, dropout_apply
from .tensor import (
    ContractError,
    Tensor,
    broadcast_mul,
    concat,
    elu,
    expand,
    hadamard,
    linear,
    parameter,
    reshape,
    sigmoid,
    softmax,
    stack,
    weighted_sum,
    zeros,
)

CONTROL_VARIANTS = ("word_attention", "word_vectors", "question_vector", "none")
WRITE_VARIANTS = ("linear", "retrieved_direct", "retrieved_affine", "gate_only")
FEATURE_DIM = 3 + 6 + 2 + 2 + 1 + 2  # one-hots, empty flag, (row, col) ramps


class ConfigError(ValueError):
    pass


@dataclass
class MacConfig:
    d: int = 64
    p: int = 4
    share_weights: bool = True
    use_self_attention: bool = False
    use_memory_gate: bool = False
    gate_bias: float = 0.0
    control_variant: str = "word_attention"
    write_variant: str = "linear"
    predict_with_question: bool = True
    direct_kb_in_read: bool = True
    grid_size: int = 5
    keep_prob: float = 0.85
    dropout_embeddings: bool = True
    dropout_kb: bool = True
    dropout_memory: bool = True
    dropout_recurrent: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.p < 1:
            raise ConfigError(f"p must be >= 1, got {self.p}")
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"d must be a positive even number, got {self.d}")
        if self.control_variant not in CONTROL_VARIANTS:
            raise ConfigError(f"control_variant must be one of {CONTROL_VARIANTS}")
        if self.write_variant not in WRITE_VARIANTS:
            raise ConfigError(f"write_variant must be one of {WRITE_VARIANTS}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError("keep_prob must lie in (0, 1]")
        if self.grid_size < 1:
            raise ConfigError("grid_size must be positive")

    @property
    def gated(self) -> bool:
        return self.use_memory_gate or self.write_variant == "gate_only"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- knowledge base

def scene_features(scene: gridworld.Scene, grid_size: int) -> np.ndarray:
    """Symbolic per-cell features [H x W x FEATURE_DIM]."""
    if scene.grid_size != grid_size:
        raise gridworld.SceneError(f"scene grid {scene.grid_size} does not match model grid {grid_size}")
    n = grid_size
    feats = np.zeros((n, n, FEATURE_DIM))
    feats[:, :, 13] = 1.0
    ramp = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
    feats[:, :, 14] = ramp[:, None]
    feats[:, :, 15] = ramp[None, :]
    offsets = {"shape": 0, "color": 3, "size": 9, "material": 11}
    for o in scene.objects:
        feats[o.row, o.col, 13] = 0.0
        for attr, base in offsets.items():
            values = gridworld.ATTRIBUTES[attr]
            v = o.attr(attr)
            if v not in values:
                raise gridworld.SceneError(f"unknown {attr} {v!r}")
            feats[o.row, o.col, base + values.index(v)] = 1.0
    return feats


class KnowledgeBaseStem(Module):
    """Two 1x1 convolutions with ELU over the symbolic cell features.

    An empty cell carries only the empty flag and its position, so the stem
    sees the learned column of the first layer for that flag.
    """

    def __init__(self, d: int, rng):
        self.conv1 = Linear(FEATURE_DIM, d, rng)
        self.conv2 = Linear(d, d, rng)

    def __call__(self, feats: Tensor) -> Tensor:
        return elu(self.conv2(elu(self.conv1(feats))))


# ---------------------------------------------------------------- cell

class MacCell(Module):
    def __init__(self, cfg: MacConfig, rng):
        d = cfg.d
        if cfg.control_variant in ("word_attention", "word_vectors"):
            self.control_cq = Linear(2 * d, d, rng)
            self.control_attn = Linear(d, 1, rng)
        self.read_mem = Linear(d, d, rng)
        self.read_kb = Linear(d, d, rng)
        self.read_combine = Linear(2 * d if cfg.direct_kb_in_read else d, d, rng)
        self.read_attn = Linear(d, 1, rng)
        if cfg.write_variant == "linear":
            self.write_info = Linear(2 * d, d, rng)
        elif cfg.write_variant == "retrieved_affine":
            self.write_info = Linear(d, d, rng)
        if cfg.use_self_attention:
            self.write_sa_attn = Linear(d, 1, rng)
            self.write_sa_combine = Linear(2 * d, d, rng)  # [W_s | W_p] and one bias
        if cfg.gated:
            self.write_gate = Linear(d, 1, rng, bias_init=cfg.gate_bias)


def control_unit(cell: MacCell, c_prev: Tensor, q_i: Tensor, cw: Tensor, mask=None):
    """Attend over the question words; returns (c_i [B x d], cv [B x S])."""
    B, S, d = cw.shape
    if S == 0:
        raise ContractError("control unit needs at least one word")
    cq = cell.control_cq(concat([c_prev, q_i]))
    inter = broadcast_mul(cq, cw)
    ca = reshape(cell.control_attn(inter), (B, S))
    cv = softmax(ca, mask)
    return weighted_sum(cv, cw), cv


def project_knowledge_base(cell: MacCell, K: Tensor, cfg: MacConfig):
    """Step-independent read-unit terms: (W_k k + b_k, W_direct k) per location.

    The second term is the knowledge-base half of the combine layer, so that
    ``W [I, k] + b == W_I I + (W_direct k) + b``.
    """
    d = cfg.d
    kb = cell.read_kb(K)
    if not cfg.direct_kb_in_read:
        return kb, None
    W_direct = cell.read_combine.W[:, d:]
    return kb, linear(K, W_direct)


def read_unit(cell: MacCell, m_prev: Tensor, K: Tensor, c_i: Tensor, cfg: MacConfig, kb_terms=None):
    """Attend over the knowledge base [B x N x d]; returns (r_i, rv [B x N]).

    The question reaches this unit only through ``c_i`` and ``m_prev``.
    ``kb_terms`` caches :func:`project_knowledge_base` across steps.
    """
    B, N, d = K.shape
    kb, direct = kb_terms if kb_terms is not None else project_knowledge_base(cell, K, cfg)
    I = broadcast_mul(cell.read_mem(m_prev), kb)
    if cfg.direct_kb_in_read:
        I2 = linear(I, cell.read_combine.W[:, :d], cell.read_combine.b) + direct
    else:
        I2 = cell.read_combine(I)
    ra = reshape(cell.read_attn(broadcast_mul(c_i, I2)), (B, N))
    rv = softmax(ra)
    return weighted_sum(rv, K, ordered=False), rv


def write_unit(cell: MacCell, r_i: Tensor, m_prev: Tensor, c_i: Tensor, history, cfg: MacConfig,
               step: int | None = None):
    """Integrate ``r_i`` into memory.

    Returns (m_i, gate [B] or None, sa [B x i-1] or None, candidate m'_i).
    ``history`` holds (c_j, m_j) for every earlier step j = 1..i-1.
    """
    if step is not None and len(history) != step - 1:
        raise ContractError(f"write unit at step {step} needs {step - 1} history entries, got {len(history)}")
    B, d = r_i.shape
    if cfg.write_variant == "linear":
        m_new = cell.write_info(concat([r_i, m_prev]))
    elif cfg.write_variant == "retrieved_affine":
        m_new = cell.write_info(r_i)
    else:
        m_new = r_i

    sa = None
    if cfg.use_self_attention:
        if history:
            scores = [reshape(cell.write_sa_attn(hadamard(c_i, c_j)), (B,)) for c_j, _ in history]
            sa = softmax(stack(scores, axis=1))
            m_sa = weighted_sum(sa, stack([m_j for _, m_j in history], axis=1))
        else:
            m_sa = zeros(B, d)
        m_new = cell.write_sa_combine(concat([m_sa, m_new]))

    gate = None
    if cfg.gated:
        gate = reshape(sigmoid(cell.write_gate(c_i)), (B,))
        g = expand(gate, 1, d)
        m_i = hadamard(g, m_prev) + hadamard(1.0 - g, m_new)
        return m_i, gate, sa, m_new
    return m_new, gate, sa, m_new


# ---------------------------------------------------------------- network

@dataclass
class CellTrace:
    """Per-step states and attention maps (batched arrays)."""

    c: list = field(default_factory=list)
    m: list = field(default_factory=list)
    cv: list = field(default_factory=list)
    rv: list = field(default_factory=list)
    gate: list = field(default_factory=list)
    sa: list = field(default_factory=list)
    m_candidate: list = field(default_factory=list)
    m_prev: list = field(default_factory=list)
    cw: np.ndarray | None = None
    param_source: str = "raw"


class MacNetwork(Module):
    """All learned weights of a MAC model plus its forward pass."""

    def __init__(self, cfg: MacConfig, n_words: int, n_answers: int, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.n_words = n_words
        self.n_answers = n_answers
        self.source = "raw"
        rng = np.random.default_rng(seed)
        d = cfg.d
        self.embedding = Embedding(n_words, rng)
        self.bilstm = BiLstm(EMBED_DIM, d, rng)
        if cfg.control_variant == "word_vectors":
            self.word_proj = Linear(EMBED_DIM, d, rng)
        self.q_proj = [Linear(d, d, rng) for _ in range(cfg.p)]
        self.kb_stem = KnowledgeBaseStem(d, rng)
        self.cells = [MacCell(cfg, rng) for _ in range(1 if cfg.share_weights else cfg.p)]
        self.c0 = parameter(np.zeros(d))
        self.m0 = parameter(np.zeros(d))
        self.out_hidden = Linear(2 * d if cfg.predict_with_question else d, d, rng)
        self.out_logits = Linear(d, n_answers, rng)

    def cell(self, i: int) -> MacCell:
        """Cell parameters for step ``i`` (1-based)."""
        return self.cells[0] if self.cfg.share_weights else self.cells[i - 1]

    def cell_parameter_count(self) -> int:
        return sum(p.size for name, p in self.named_parameters() if name.startswith("cells."))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(arrays):
            missing = sorted(set(params) ^ set(arrays))
            raise KeyError(f"parameter names differ: {missing[:5]}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    def with_weights(self, arrays: dict[str, np.ndarray], source: str) -> "MacNetwork":
        clone = copy.deepcopy(self)
        clone.load_state_dict(arrays)
        clone.source = source
        return clone

    # -- units

    def position_aware_question(self, q: Tensor, i: int) -> Tensor:
        if not 1 <= i <= self.cfg.p:
            raise ContractError(f"step {i} outside 1..{self.cfg.p}")
        return self.q_proj[i - 1](q)

    def build_knowledge_base(self, scenes) -> Tensor:
        """Knowledge base [B x H x W x d] for a list of scenes."""
        feats = np.stack([scene_features(s, self.cfg.grid_size) for s in scenes])
        return self.kb_stem(Tensor(feats))

    def output_unit(self, q: Tensor, m_p: Tensor) -> Tensor:
        x = concat([q, m_p]) if self.cfg.predict_with_question else m_p
        return self.out_logits(elu(self.out_hidden(x)))

    # -- forward

    def forward(self, tokens, scenes, lengths=None, training: bool = False,
                rng: np.random.Generator | None = None, record: bool = False):
        """Return (logits [B x A], CellTrace or None).

        ``tokens`` is an integer matrix [B x S] padded with 0 beyond
        ``lengths``. Dropout is active only when ``training`` is set, and then
        ``rng`` supplies the masks.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        B, S = tokens.shape
        if S == 0:
            raise ContractError("empty question")
        lengths = np.full(B, S) if lengths is None else np.asarray(lengths)
        mask = np.arange(S)[None, :] < lengths[:, None]
        if training and rng is None:
            raise ContractError("training forward needs an rng for dropout masks")
        d = cfg.d

        def draw(shape, enabled):
            if not (training and enabled):
                return None
            return DropoutMask.draw(shape, cfg.keep_prob, rng)

        emb_mask = draw((B, EMBED_DIM), cfg.dropout_embeddings)
        kb_mask = draw((B, d), cfg.dropout_kb)
        mem_mask = draw((B, d), cfg.dropout_memory)
        rec_masks = None
        if training and cfg.dropout_recurrent:
            rec_masks = (draw((B, d // 2), True).mask, draw((B, d // 2), True).mask)

        emb = dropout_apply(self.embedding(tokens), emb_mask, training)
        cw, q = self.bilstm(emb, mask, rec_masks)
        words = self.word_proj(emb) if cfg.control_variant == "word_vectors" else cw

        K = self.build_knowledge_base(scenes)
        H = cfg.grid_size
        K = dropout_apply(reshape(K, (B, H * H, d)), kb_mask, training)

        trace = CellTrace(param_source=self.source) if record else None
        if record:
            trace.cw = words.data.copy()
        c = expand(self.c0, 0, B)
        m = expand(self.m0, 0, B)
        history = []
        kb_cache = {}
        for i in range(1, cfg.p + 1):
            cell = self.cell(i)
            if id(cell) not in kb_cache:
                kb_cache[id(cell)] = project_knowledge_base(cell, K, cfg)
            q_i = self.position_aware_question(q, i)
            cv = None
            if cfg.control_variant in ("word_attention", "word_vectors"):
                c, cv = control_unit(cell, c, q_i, words, mask)
            elif cfg.control_variant == "question_vector":
                c = q_i
            else:
                c = zeros(B, d)
            m_in = dropout_apply(m, mem_mask, training)
            r, rv = read_unit(cell, m_in, K, c, cfg, kb_cache[id(cell)])
            m_new, gate, sa, cand = write_unit(cell, r, m_in, c, history, cfg, step=i)
            history.append((c, m_new))
            if record:
                trace.c.append(c.data.copy())
                trace.m.append(m_new.data.copy())
                trace.m_prev.append(m_in.data.copy())
                trace.m_candidate.append(cand.data.copy())
                trace.cv.append(None if cv is None else cv.data.copy())
                trace.rv.append(rv.data.reshape(B, H, H).copy())
                trace.gate.append(None if gate is None else gate.data.copy())
                trace.sa.append(None if sa is None else sa.data.copy())
            m = m_new
        return self.output_unit(q, m), trace

    __call__ = forward
