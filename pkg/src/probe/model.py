"""The reliability classifier: atom encoder with charge injection, masked
multi-head self-attention with a residual LayerNorm branch, masked mean/max
pooling joined with the predicted energy and atom count, a linear projection
to the molecular embedding, and an MLP classifier head.

Forward produces class probabilities, the molecular embedding, and
(optionally) the attention tensor used for per-atom importance scores.
Backward is hand-chained through the same layers in reverse.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .data import Batch, MoleculeRecord, make_batches
from .errors import ConfigError, DataError, DimensionError, StateError


@dataclass
class ProbeConfig:
    """Architecture settings plus the scalar-feature normalization stats.

    ``encoder_widths`` are the encoder layer outputs (the input width is
    ``input_dim``); the attention width is the final encoder width and
    must equal heads * head_dim. The descriptor feeding the projection is
    [mean-pool | max-pool | energy | atom count], i.e. 2 * attention
    width + 2 wide.
    """

    input_dim: int = 256
    encoder_widths: tuple = (256, 128, 256)
    heads: int = 32
    head_dim: int = 8
    embedding_dim: int = 256
    classifier_widths: tuple = (128, 32)
    dropout: float = 0.1
    use_charges: bool = True
    normalize_scalars: bool = True   # z-score e_pred and N before pooling concat
    energy_mean: float = 0.0
    energy_std: float = 1.0
    natoms_mean: float = 0.0
    natoms_std: float = 1.0

    @property
    def attn_width(self) -> int:
        return self.encoder_widths[-1]

    @property
    def descriptor_dim(self) -> int:
        return 2 * self.attn_width + 2

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if not self.encoder_widths or not self.classifier_widths:
            raise ConfigError("encoder_widths and classifier_widths must be non-empty")
        if self.heads * self.head_dim != self.attn_width:
            raise ConfigError(
                f"heads * head_dim = {self.heads * self.head_dim} must equal the "
                f"encoder output width {self.attn_width}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["classifier_widths"] = list(self.classifier_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        d = dict(d)
        d["encoder_widths"] = tuple(d["encoder_widths"])
        d["classifier_widths"] = tuple(d["classifier_widths"])
        return cls(**d)


@dataclass
class ForwardOutput:
    probs: np.ndarray                  # (B, 2): [P(reliable), P(unreliable)]
    logits: np.ndarray                 # (B, 2)
    mol_embedding: np.ndarray          # (B, embedding_dim)
    attention: np.ndarray | None = None  # (B, H, N, N) when captured


class _MlpLayer:
    """Linear -> LayerNorm -> GELU -> Dropout."""

    def __init__(self, in_dim, out_dim, dropout, rng, name):
        self.linear = nn.Linear(in_dim, out_dim, rng, f"{name}.linear")
        self.norm = nn.LayerNorm(out_dim, f"{name}.norm")
        self.act = nn.Gelu()
        self.drop = nn.Dropout(dropout)

    def parameters(self):
        return self.linear.parameters() + self.norm.parameters()

    def forward(self, x, training, rng):
        y = self.act.forward(self.norm.forward(self.linear.forward(x)))
        return self.drop.forward(y, training, rng)

    def backward(self, grad):
        grad = self.drop.backward(grad)
        return self.linear.backward(self.norm.backward(self.act.backward(grad)))


class ProbeModel:
    """Parameter registry and forward/backward for the full classifier."""

    def __init__(self, config: ProbeConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        self.training = True
        rng = nn.seeded_rng(seed, 0x1417)
        self._dropout_rng = nn.seeded_rng(seed, 0xD809)

        dims = [config.input_dim, *config.encoder_widths]
        self.encoder = [
            _MlpLayer(dims[i], dims[i + 1], config.dropout, rng, f"encoder.{i}")
            for i in range(len(dims) - 1)]
        w = config.attn_width
        self.charge_proj = (nn.Linear(1, w, rng, "charge", bias=False)
                            if config.use_charges else None)
        self.attn = nn.MultiHeadAttention(w, config.heads, rng, "attn")
        self.post_attn_norm = nn.LayerNorm(w, "post_attn_norm")
        self.proj = nn.Linear(config.descriptor_dim, config.embedding_dim, rng, "proj")
        cdims = [config.embedding_dim, *config.classifier_widths]
        self.classifier = [
            _MlpLayer(cdims[i], cdims[i + 1], config.dropout, rng, f"classifier.{i}")
            for i in range(len(cdims) - 1)]
        self.head = nn.Linear(cdims[-1], 2, rng, "classifier.out")
        self._cache = None

        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate parameter names in model")

    # -- bookkeeping ------------------------------------------------------

    def parameters(self) -> list[nn.Parameter]:
        params = []
        for layer in self.encoder:
            params += layer.parameters()
        if self.charge_proj is not None:
            params += self.charge_proj.parameters()
        params += self.attn.parameters()
        params += self.post_attn_norm.parameters()
        params += self.proj.parameters()
        for layer in self.classifier:
            params += layer.parameters()
        params += self.head.parameters()
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self) -> "ProbeModel":
        self.training = True
        return self

    def eval(self) -> "ProbeModel":
        self.training = False
        return self

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        self._dropout_rng = rng

    # -- forward / backward ----------------------------------------------

    def forward(self, batch: Batch, capture_attention: bool = False) -> ForwardOutput:
        cfg = self.config
        if batch.embeddings.shape[-1] != cfg.input_dim:
            raise DimensionError(
                f"batch embedding width {batch.embeddings.shape[-1]} does not match "
                f"model input_dim {cfg.input_dim}")
        if np.any(batch.n_atoms < 1):
            raise DataError("batch contains an empty molecule")
        rng = self._dropout_rng

        x = batch.embeddings
        for layer in self.encoder:
            x = layer.forward(x, self.training, rng)
        z = x
        if self.charge_proj is not None:
            z = z + self.charge_proj.forward(batch.charges[..., None])

        attn_out, attention = self.attn.forward(z, batch.mask)
        branch = self.post_attn_norm.forward(attn_out)
        z_prime = z + branch

        mask3 = batch.mask[..., None]
        counts = batch.n_atoms.astype(np.float64)[:, None]
        mean_pool = (z_prime * mask3).sum(axis=1) / counts
        neg_inf = np.where(mask3, z_prime, -np.inf)
        argmax = neg_inf.argmax(axis=1)                      # (B, W)
        max_pool = np.take_along_axis(z_prime, argmax[:, None, :], axis=1)[:, 0, :]

        if cfg.normalize_scalars:
            e_feat = (batch.e_pred - cfg.energy_mean) / cfg.energy_std
            n_feat = (batch.n_atoms - cfg.natoms_mean) / cfg.natoms_std
        else:
            e_feat = batch.e_pred.astype(np.float64)
            n_feat = batch.n_atoms.astype(np.float64)
        g = np.concatenate([mean_pool, max_pool, e_feat[:, None], n_feat[:, None]], axis=1)

        embedding = self.proj.forward(g)
        y = embedding
        for layer in self.classifier:
            y = layer.forward(y, self.training, rng)
        logits = self.head.forward(y)

        shifted = logits - logits.max(axis=1, keepdims=True)
        expv = np.exp(shifted)
        probs = expv / expv.sum(axis=1, keepdims=True)

        self._cache = (batch, argmax, z_prime.shape)
        return ForwardOutput(probs=probs, logits=logits, mol_embedding=embedding,
                             attention=attention if capture_attention else None)

    def backward(self, grad_logits: np.ndarray) -> None:
        """Accumulate parameter gradients given dLoss/dLogits."""
        if self._cache is None:
            raise StateError("backward called before forward")
        batch, argmax, zshape = self._cache
        w = self.config.attn_width

        grad = self.head.backward(grad_logits)
        for layer in reversed(self.classifier):
            grad = layer.backward(grad)
        dg = self.proj.backward(grad)

        d_mean = dg[:, :w]
        d_max = dg[:, w:2 * w]
        counts = batch.n_atoms.astype(np.float64)[:, None, None]
        dz_prime = (batch.mask[..., None] * d_mean[:, None, :]) / counts
        d_max_scatter = np.zeros(zshape)
        np.put_along_axis(d_max_scatter, argmax[:, None, :], d_max[:, None, :], axis=1)
        dz_prime = dz_prime + d_max_scatter

        d_attn_out = self.post_attn_norm.backward(dz_prime)
        dz = dz_prime + self.attn.backward(d_attn_out)

        if self.charge_proj is not None:
            self.charge_proj.backward(dz)
        grad = dz
        for layer in reversed(self.encoder):
            grad = layer.backward(grad)


def init_model(config: ProbeConfig, seed: int = 0) -> ProbeModel:
    """Build a model with deterministic scaled-uniform fan-in init."""
    return ProbeModel(config, seed=seed)


# ---------------------------------------------------------------------------
# attention importance


def importance_from_attention(attention: np.ndarray | None, mask: np.ndarray,
                              n_atoms: np.ndarray) -> list[np.ndarray]:
    """Normalized total attention received per atom.

    Sums attention over heads and real query atoms for each real key atom,
    then normalizes so each molecule's scores sum to 1.
    """
    if attention is None:
        raise StateError("attention was not captured; run forward with capture_attention")
    qmask = mask[:, None, :, None]
    received = (attention * qmask).sum(axis=(1, 2))          # (B, N)
    received = received * mask                               # padded keys are exactly 0 anyway
    totals = received.sum(axis=1, keepdims=True)
    scores = received / totals
    return [scores[i, :n_atoms[i]] for i in range(len(n_atoms))]


def atom_importance(model: ProbeModel, batch: Batch) -> list[np.ndarray]:
    """Per-molecule importance score vectors (eval mode only)."""
    if model.training:
        raise StateError("atom_importance requires eval mode")
    out = model.forward(batch, capture_attention=True)
    return importance_from_attention(out.attention, batch.mask, batch.n_atoms)


# ---------------------------------------------------------------------------
# molecular-embedding export


def _iter_outputs(model: ProbeModel, records: list[MoleculeRecord], batch_size: int):
    for batch in make_batches(records, batch_size=batch_size):
        out = model.forward(batch)
        for i in range(len(batch)):
            yield int(batch.mol_ids[i]), out.mol_embedding[i], float(out.probs[i, 1])


def export_molecular_embeddings(model: ProbeModel, records: list[MoleculeRecord],
                                path, fmt: str | None = None,
                                batch_size: int = 256) -> None:
    """Write mol_id, molecular embedding, and P(unreliable) per record.

    ``fmt`` is "csv" (header row, one row per molecule) or "binary"
    (mol_id as u64 then embedding and probability as binary32 LE);
    inferred from the extension when omitted.
    """
    if fmt is None:
        fmt = "binary" if str(path).endswith(".bin") else "csv"
    if fmt not in ("csv", "binary"):
        raise ConfigError(f"unknown export format {fmt!r}")
    model.eval()
    e_dim = model.config.embedding_dim
    if fmt == "csv":
        with open(path, "w") as fh:
            cols = ["mol_id"] + [f"e_{j}" for j in range(e_dim)] + ["p_unreliable"]
            fh.write(",".join(cols) + "\n")
            for mol_id, emb, p in _iter_outputs(model, records, batch_size):
                # round to binary32 so csv and binary exports decode identically
                vals = np.asarray(emb, dtype=np.float32)
                row = [str(mol_id)] + [repr(float(v)) for v in vals] + [repr(float(np.float32(p)))]
                fh.write(",".join(row) + "\n")
    else:
        with open(path, "wb") as fh:
            for mol_id, emb, p in _iter_outputs(model, records, batch_size):
                fh.write(struct.pack("<Q", mol_id))
                payload = np.empty(e_dim + 1, dtype="<f4")
                payload[:e_dim] = emb
                payload[e_dim] = p
                fh.write(payload.tobytes())
