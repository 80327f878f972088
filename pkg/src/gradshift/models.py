"""Encoder, mixture-density decoder and reconstruction ablation models.

All forwards are recorded on a Tape so gradients can be read at the two
designated intermediates: the encoder output (mark ``latent``) and the input
to the decoder's final affine layer (mark ``last_layer_input``), the site
where the shift score is taken.

Every model normalizes its input history by translating the sample so the
last observed point is the origin.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Node, Tape

LATENT_MARK = "latent"
LAST_LAYER_MARK = "last_layer_input"

LOG_2PI = math.log(2.0 * math.pi)


def softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


def normalize_history(points: np.ndarray) -> np.ndarray:
    """Translate so the last observed point of each sample is the origin."""
    points = np.asarray(points, dtype=np.float64)
    return points - points[..., -1:, :]


def _init_affine(rng, n_in, n_out, scale=1.0):
    w = rng.normal(0.0, scale / math.sqrt(n_in), size=(n_in, n_out))
    return w, np.zeros(n_out)


def _leaves(tape, params, trainable):
    return {name: tape.leaf(value, requires_grad=trainable)
            for name, value in params.items()}


def _sin_positions(n, d):
    """Fixed sinusoidal step encoding (deterministic, no parameters)."""
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return enc


# ----------------------------------------------------------------------
# encoder
# ----------------------------------------------------------------------

@dataclass
class EncoderConfig:
    n_past: int
    ctx_channels: int = 0
    arch: str = "mlp"          # "mlp" | "attention"
    hidden: tuple = (64,)
    latent: int = 32
    d_model: int = 32          # attention only

    def __post_init__(self):
        if self.arch not in ("mlp", "attention"):
            raise ValueError(f"unknown encoder arch {self.arch!r}")
        self.hidden = tuple(self.hidden)

    @property
    def channels(self):
        return 2 + self.ctx_channels


class Encoder:
    """Maps an observed history (plus per-step context) to a latent vector."""

    kind = "encoder"

    def __init__(self, config: EncoderConfig, params: dict):
        self.config = config
        self.params = params
        self.frozen = False

    @classmethod
    def init(cls, config: EncoderConfig, seed: int) -> "Encoder":
        rng = np.random.default_rng(seed)
        params = {}
        if config.arch == "mlp":
            widths = [config.n_past * config.channels, *config.hidden,
                      config.latent]
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                params[f"w{i}"], params[f"b{i}"] = _init_affine(rng, a, b)
        else:
            d = config.d_model
            params["tok_w"], params["tok_b"] = _init_affine(rng, config.channels, d)
            for head in ("q", "k", "v", "o"):
                params[f"{head}_w"], params[f"{head}_b"] = _init_affine(rng, d, d)
            params["out_w"], params["out_b"] = _init_affine(rng, d, config.latent)
        return cls(config, params)

    def _prepare(self, points, context):
        points = np.asarray(points, dtype=np.float64)
        cfg = self.config
        if points.shape[-2:] != (cfg.n_past, 2):
            raise ValueError(
                f"encoder expects (..., {cfg.n_past}, 2) points, got {points.shape}")
        stack = normalize_history(points)
        if cfg.ctx_channels:
            if context is None:
                raise ValueError("encoder configured with context channels "
                                 "but none provided")
            context = np.asarray(context, dtype=np.float64)
            if context.shape[-2:] != (cfg.n_past, cfg.ctx_channels):
                raise ValueError(
                    f"context must be (..., {cfg.n_past}, {cfg.ctx_channels}), "
                    f"got {context.shape}")
            stack = np.concatenate([stack, context], axis=-1)
        return stack

    def encode(self, tape: Tape, points, context=None,
               trainable: bool = False) -> tuple[Node, dict]:
        """Record the encoder forward; returns (latent node, param nodes)."""
        stack = self._prepare(points, context)
        nodes = _leaves(tape, self.params, trainable)
        cfg = self.config
        if cfg.arch == "mlp":
            flat_shape = stack.shape[:-2] + (cfg.n_past * cfg.channels,)
            h = tape.leaf(stack.reshape(flat_shape))
            n_layers = len(cfg.hidden) + 1
            for i in range(n_layers):
                h = tape.affine(h, nodes[f"w{i}"], nodes[f"b{i}"])
                if i < n_layers - 1:
                    h = tape.tanh(h)
            z = h
        else:
            x = tape.leaf(stack)
            tok = tape.affine(x, nodes["tok_w"], nodes["tok_b"])
            tok = tape.add(tok, tape.const(_sin_positions(cfg.n_past, cfg.d_model)))
            q = tape.affine(tok, nodes["q_w"], nodes["q_b"])
            k = tape.affine(tok, nodes["k_w"], nodes["k_b"])
            v = tape.affine(tok, nodes["v_w"], nodes["v_b"])
            scores = tape.scale(tape.matmul(q, k, transpose_b=True),
                                1.0 / math.sqrt(cfg.d_model))
            attended = tape.matmul(tape.softmax(scores), v)
            mixed = tape.add(tok, tape.affine(attended, nodes["o_w"], nodes["o_b"]))
            pooled = tape.mean(mixed, axis=-2)
            z = tape.affine(pooled, nodes["out_w"], nodes["out_b"])
        tape.mark(LATENT_MARK, z)
        return z, nodes


# ----------------------------------------------------------------------
# mixture-density decoder
# ----------------------------------------------------------------------

@dataclass
class MdnConfig:
    latent: int
    horizon: int
    components: int = 3
    hidden: tuple = (64, 32)
    var_floor: float = 1e-4
    init_var: float = 1.0

    def __post_init__(self):
        if not 1 <= self.components <= 8:
            raise ValueError("components must be in 1..8")
        if self.var_floor <= 0:
            raise ValueError("var_floor must be positive")
        self.hidden = tuple(self.hidden)
        if not self.hidden:
            raise ValueError("decoder needs at least one hidden layer")

    @property
    def block(self):
        # flattened size of one mean/scale head: components x horizon x 2
        return self.components * self.horizon * 2

    @property
    def head_width(self):
        return self.components + 2 * self.block

    @property
    def trunk_width(self):
        return self.hidden[-1]


@dataclass
class MdnOutput:
    """GMM parameters for one forecast: simplex weights, means (m) and
    diagonal variances (m^2), plus tape handles for gradient reads."""

    logits: Node
    pi: Node
    mu: Node
    var: Node
    trunk: Node
    params: dict

    @property
    def pi_values(self):
        return self.pi.value

    @property
    def mu_values(self):
        return self.mu.value

    @property
    def var_values(self):
        return self.var.value


class MdnDecoder:
    """MLP trunk ending in one affine head that emits (logits, means, scales).

    The trunk output (width config.hidden[-1]) is the input to that final
    layer and carries the ``last_layer_input`` mark.
    """

    kind = "mdn"

    def __init__(self, config: MdnConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: MdnConfig, seed: int) -> "MdnDecoder":
        rng = np.random.default_rng(seed)
        params = {}
        widths = [config.latent, *config.hidden]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"w{i}"], params[f"b{i}"] = _init_affine(rng, a, b)
        w, b = _init_affine(rng, config.trunk_width, config.head_width, scale=0.1)
        # start with unit-ish predicted variance for a stable initial loss
        raw0 = softplus_inv(max(config.init_var - config.var_floor, 1e-6))
        b[config.components + config.block:] = raw0
        params["head_w"], params["head_b"] = w, b
        return cls(config, params)

    def decode(self, tape: Tape, z: Node, trainable: bool = False) -> MdnOutput:
        cfg = self.config
        if z.value.shape[-1] != cfg.latent:
            raise ValueError(
                f"decoder expects latent width {cfg.latent}, got {z.value.shape}")
        nodes = _leaves(tape, self.params, trainable)
        h = z
        for i in range(len(cfg.hidden)):
            h = tape.tanh(tape.affine(h, nodes[f"w{i}"], nodes[f"b{i}"]))
        tape.mark(LAST_LAYER_MARK, h)
        head = tape.affine(h, nodes["head_w"], nodes["head_b"])
        k, blk = cfg.components, cfg.block
        logits = tape.slice(head, 0, k)
        mu_flat = tape.slice(head, k, k + blk)
        raw_flat = tape.slice(head, k + blk, k + 2 * blk)
        lead = z.value.shape[:-1]
        mu = tape.reshape(mu_flat, lead + (k, cfg.horizon, 2))
        var = tape.add_const(
            tape.reshape(tape.softplus(raw_flat), lead + (k, cfg.horizon, 2)),
            cfg.var_floor)
        pi = tape.softmax(logits)
        out = MdnOutput(logits, pi, mu, var, h, nodes)
        assert np.all(np.abs(out.pi_values.sum(-1) - 1.0) <= 1e-9)
        assert np.all(out.var_values >= cfg.var_floor)
        return out


def mdn_output_from_values(tape: Tape, pi, mu, var,
                           requires_grad: bool = True) -> MdnOutput:
    """Build an MdnOutput from explicit mixture parameters (for oracles)."""
    pi = np.asarray(pi, dtype=np.float64)
    logits = tape.leaf(np.log(pi), requires_grad=requires_grad)
    mu_node = tape.leaf(mu, requires_grad=requires_grad)
    var_node = tape.leaf(var, requires_grad=requires_grad)
    return MdnOutput(logits, tape.softmax(logits), mu_node, var_node,
                     trunk=logits, params={})


def mdn_nll(tape: Tape, out: MdnOutput, target) -> Node:
    """Negative log-likelihood of a target under the predicted mixture.

    The mixture is a diagonal Gaussian over all horizon x 2 coordinates,
    combined in log space: -logsumexp_k(log pi_k + log N_k). Returns the
    per-sample NLL (scalar node for a single sample).
    """
    if isinstance(target, Node):
        target_node = target
    else:
        target_node = tape.leaf(np.asarray(target, dtype=np.float64))
    tshape = target_node.value.shape
    mshape = out.mu.value.shape
    if tshape[-2:] != mshape[-2:]:
        raise ValueError(
            f"target shape {tshape} does not match forecast horizon {mshape}")
    expanded = tape.reshape(target_node, tshape[:-2] + (1,) + tshape[-2:])
    diff = tape.sub(out.mu, expanded)
    logvar = tape.log(out.var)
    inv_var = tape.exp(tape.scale(logvar, -1.0))
    quad = tape.sum(tape.mul(tape.square(diff), inv_var), axis=(-2, -1))
    sum_logvar = tape.sum(logvar, axis=(-2, -1))
    dims = mshape[-2] * mshape[-1]
    log_comp = tape.scale(
        tape.add_const(tape.add(quad, sum_logvar), dims * LOG_2PI), -0.5)
    log_pi = tape.sub(out.logits, tape.logsumexp(out.logits, keepdims=True))
    return tape.scale(tape.logsumexp(tape.add(log_pi, log_comp)), -1.0)


# ----------------------------------------------------------------------
# reconstruction ablation models
# ----------------------------------------------------------------------

@dataclass
class ReconConfig:
    n_past: int
    ctx_channels: int = 0
    hidden: tuple = (64,)
    latent: int = 32
    arch: str = "mlp"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)

    def encoder_config(self):
        return EncoderConfig(self.n_past, self.ctx_channels, self.arch,
                             self.hidden, self.latent)


class Autoencoder:
    """Reconstructs the full normalized history; score is the MSE."""

    kind = "ae"

    def __init__(self, config: ReconConfig, encoder: Encoder, params: dict):
        self.config = config
        self.encoder = encoder
        self.params = params

    @classmethod
    def init(cls, config: ReconConfig, seed: int) -> "Autoencoder":
        encoder = Encoder.init(config.encoder_config(), seed)
        rng = np.random.default_rng(seed + 1)
        params = {}
        widths = [config.latent, *reversed(config.hidden), config.n_past * 2]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"d_w{i}"], params[f"d_b{i}"] = _init_affine(rng, a, b)
        return cls(config, encoder, params)

    @property
    def all_params(self):
        merged = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        merged.update(self.params)
        return merged

    def _decode(self, tape, z, nodes):
        h = z
        n_layers = len(self.config.hidden) + 1
        for i in range(n_layers):
            h = tape.affine(h, nodes[f"d_w{i}"], nodes[f"d_b{i}"])
            if i < n_layers - 1:
                h = tape.tanh(h)
        lead = z.value.shape[:-1]
        return tape.reshape(h, lead + (self.config.n_past, 2))

    def forward(self, tape, points, context=None, trainable=False):
        z, enc_nodes = self.encoder.encode(tape, points, context, trainable)
        nodes = _leaves(tape, self.params, trainable)
        recon = self._decode(tape, z, nodes)
        merged = {f"enc.{k}": v for k, v in enc_nodes.items()}
        merged.update(nodes)
        return recon, merged

    def loss(self, tape, points, context=None, trainable=False):
        """Per-sample mean squared error over all coordinates."""
        recon, nodes = self.forward(tape, points, context, trainable)
        target = tape.leaf(normalize_history(points))
        err = tape.mean(tape.square(tape.sub(recon, target)), axis=(-2, -1))
        return err, nodes


class MaskedAutoencoder:
    """Reconstructs masked history steps from the visible remainder.

    Masked steps are replaced by a learned token before encoding; the loss
    is the MSE restricted to the masked (hidden) steps.
    """

    kind = "mae"

    def __init__(self, config: ReconConfig, encoder: Encoder, params: dict):
        self.config = config
        self.encoder = encoder
        self.params = params

    @classmethod
    def init(cls, config: ReconConfig, seed: int) -> "MaskedAutoencoder":
        if config.arch != "mlp":
            raise ValueError("masked autoencoder supports the mlp arch only")
        ae = Autoencoder.init(config, seed)
        params = dict(ae.params)
        params["mask_token"] = np.zeros(2)
        return cls(config, ae.encoder, params)

    @property
    def all_params(self):
        merged = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        merged.update(self.params)
        return merged

    @property
    def n_masked(self):
        return self.config.n_past // 2

    def check_mask(self, mask) -> np.ndarray:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape[-1] != self.config.n_past:
            raise ValueError(
                f"mask must cover {self.config.n_past} steps, got {mask.shape}")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask must be binary")
        count = mask.sum(axis=-1)
        if not np.all(count == self.n_masked):
            raise ValueError(
                f"mask must hide exactly {self.n_masked} steps, got {count}")
        return mask

    def random_mask(self, rng) -> np.ndarray:
        mask = np.zeros(self.config.n_past)
        idx = rng.choice(self.config.n_past, size=self.n_masked, replace=False)
        mask[idx] = 1.0
        return mask

    def loss(self, tape, points, mask, context=None, trainable=False):
        """Per-sample MSE over the masked steps only."""
        mask = self.check_mask(mask)
        normalized = normalize_history(points)
        nodes = _leaves(tape, self.params, trainable)
        mask_col = tape.const(mask[..., None])
        keep_col = tape.const(1.0 - mask[..., None])
        visible = tape.add(tape.mul(tape.leaf(normalized), keep_col),
                           tape.mul(nodes["mask_token"], mask_col))
        # encode the token-filled stack without re-normalizing
        cfg = self.encoder.config
        if cfg.ctx_channels:
            context = np.asarray(context, dtype=np.float64)
            stack = tape.concat([visible, tape.leaf(context)], axis=-1)
        else:
            stack = visible
        enc_nodes = _leaves(tape, self.encoder.params, trainable)
        lead = stack.value.shape[:-2]
        h = tape.reshape(stack, lead + (cfg.n_past * cfg.channels,))
        n_layers = len(cfg.hidden) + 1
        for i in range(n_layers):
            h = tape.affine(h, enc_nodes[f"w{i}"], enc_nodes[f"b{i}"])
            if i < n_layers - 1:
                h = tape.tanh(h)
        dec = h
        n_dec = len(self.config.hidden) + 1
        for i in range(n_dec):
            dec = tape.affine(dec, nodes[f"d_w{i}"], nodes[f"d_b{i}"])
            if i < n_dec - 1:
                dec = tape.tanh(dec)
        recon = tape.reshape(dec, lead + (self.config.n_past, 2))
        err = tape.mul(tape.square(tape.sub(recon, tape.leaf(normalized))),
                       mask_col)
        per_sample = tape.scale(tape.sum(err, axis=(-2, -1)),
                                1.0 / (self.n_masked * 2))
        merged = {f"enc.{k}": v for k, v in enc_nodes.items()}
        merged.update(nodes)
        return per_sample, merged


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _encode_tensor(arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {"shape": list(arr.shape),
            "data": base64.b64encode(data).decode("ascii")}


def _decode_tensor(obj):
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).copy()


def params_hash(params: dict) -> str:
    """SHA-256 over the exact little-endian bytes of all named tensors."""
    digest = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def save_checkpoint(path, kind: str, config: dict, params: dict) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "tensors": {name: _encode_tensor(arr)
                    for name, arr in sorted(params.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    params = {name: _decode_tensor(obj)
              for name, obj in payload["tensors"].items()}
    return payload["kind"], payload["config"], params


def save_model(path, model) -> None:
    if isinstance(model, Encoder):
        save_checkpoint(path, "encoder", asdict(model.config), model.params)
    elif isinstance(model, MdnDecoder):
        save_checkpoint(path, "mdn", asdict(model.config), model.params)
    elif isinstance(model, (Autoencoder, MaskedAutoencoder)):
        save_checkpoint(path, model.kind, asdict(model.config), model.all_params)
    else:
        raise TypeError(f"cannot checkpoint {type(model)}")


def load_model(path):
    kind, config, params = load_checkpoint(path)
    if kind == "encoder":
        return Encoder(EncoderConfig(**config), params)
    if kind == "mdn":
        return MdnDecoder(MdnConfig(**config), params)
    if kind in ("ae", "mae"):
        cfg = ReconConfig(**config)
        enc_params = {k[len("enc."):]: v for k, v in params.items()
                      if k.startswith("enc.")}
        own = {k: v for k, v in params.items() if not k.startswith("enc.")}
        encoder = Encoder(cfg.encoder_config(), enc_params)
        cls = Autoencoder if kind == "ae" else MaskedAutoencoder
        return cls(cfg, encoder, own)
    raise ValueError(f"unknown checkpoint kind {kind!r}")


def model_hash(model) -> str:
    if isinstance(model, (Autoencoder, MaskedAutoencoder)):
        return params_hash(model.all_params)
    return params_hash(model.params)
