"""Conditional noise predictors ``eps(x_t, y_t, t)``.

A denoiser is any callable ``(x_t, y_cells, t) -> (eps, variance_logit)``
where ``x_t`` has shape ``(..., H, W, CH)`` and ``y_cells`` ``(..., H, W)``
holds class ids with MASK encoded as ``num_classes``. ``variance_logit`` may
be ``None``. The null condition is the all-MASK map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from scdm._io import atomic_write_bytes
from scdm.errors import MapFormatError, NumericError
from scdm.imagediff.toy import ToyDataSpec
from scdm.schedule import ImageSchedule


class Denoiser(Protocol):
    num_classes: int

    def __call__(
        self, x_t: np.ndarray, y_cells: np.ndarray, t: int | np.ndarray
    ) -> tuple[np.ndarray, np.ndarray | None]: ...


class OracleDenoiser:
    """Exact ``E[eps | x_t, y_t]`` for :class:`ToyDataSpec` data.

    An unlabeled pixel of class ``c`` has a Gaussian posterior over ``x0``.
    A MASK pixel uses the class mixture weighted by ``prior[c]`` times the
    Gaussian evidence ``N(x_t; sqrt(ab) m_c, (ab sigma0^2 + 1 - ab) I)``.
    Pixels are treated independently.
    """

    flavor = "oracle"

    def __init__(self, spec: ToyDataSpec, image_sched: ImageSchedule, prior: np.ndarray | None = None):
        self.spec = spec
        self.image_sched = image_sched
        self.prior = spec.class_prior if prior is None else np.asarray(prior, dtype=float)
        if self.prior.shape != (spec.num_classes,):
            raise ValueError("prior length must equal the number of classes")
        with np.errstate(divide="ignore"):
            self._log_prior = np.log(self.prior)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def posterior_mean_x0(self, x_t: np.ndarray, y_cells: np.ndarray, t: int) -> np.ndarray:
        ab = self.image_sched.ab(t)
        s2 = self.spec.sigma0**2
        var = ab * s2 + (1.0 - ab)
        if var <= 0:
            raise NumericError(f"degenerate posterior at t={t}: ab*sigma0^2 + 1 - ab = 0")
        x = np.asarray(x_t, dtype=float)
        y = np.asarray(y_cells)
        means = self.spec.class_means  # (C, CH)
        C = self.num_classes
        # per-class posterior means, shape (..., H, W, C, CH)
        post = (math.sqrt(ab) * s2 * x[..., None, :] + (1.0 - ab) * means) / var

        labeled = y < C
        idx = np.where(labeled, y, 0)
        out = np.take_along_axis(post, idx[..., None, None], axis=-2)[..., 0, :]

        if not labeled.all():
            sq = ((x[..., None, :] - math.sqrt(ab) * means) ** 2).sum(-1)  # (..., H, W, C)
            logw = self._log_prior - sq / (2.0 * var)
            logw -= logw.max(-1, keepdims=True)
            w = np.exp(logw)
            w /= w.sum(-1, keepdims=True)
            mix = (w[..., None] * post).sum(-2)
            out = np.where(labeled[..., None], out, mix)
        return out

    def __call__(self, x_t, y_cells, t):
        t = int(t)
        ab = self.image_sched.ab(t)
        if ab >= 1:
            raise NumericError("alpha_bar = 1 leaves eps unidentifiable")
        x0 = self.posterior_mean_x0(x_t, y_cells, t)
        return (np.asarray(x_t, dtype=float) - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab), None

    def to_json(self) -> dict:
        return {"flavor": "oracle", **self.spec.to_json(), "prior": self.prior.tolist()}


def time_features(t: np.ndarray, T: int, n_freq: int) -> np.ndarray:
    """``[t/T, sin(k pi t/T), cos(k pi t/T) for k=1..n_freq]``."""
    s = np.asarray(t, dtype=float)[..., None] / T
    k = np.arange(1, n_freq + 1)
    return np.concatenate([s, np.sin(math.pi * k * s), np.cos(math.pi * k * s)], axis=-1)


PARAM_NAMES = ("embed", "w1", "b1", "w2", "b2")


@dataclass
class MLPDenoiser:
    """Per-pixel two-layer tanh network predicting ``eps`` and a variance logit.

    Input features are the pixel value, a learned label embedding and
    sinusoidal time features. The embedding row for MASK is pinned to zero.
    """

    num_classes: int
    channels: int
    T: int
    embed_dim: int = 8
    hidden: int = 32
    n_freq: int = 4
    params: dict[str, np.ndarray] = field(default_factory=dict)

    flavor = "mlp"

    @property
    def n_features(self) -> int:
        return self.channels + self.embed_dim + 1 + 2 * self.n_freq

    @classmethod
    def init(cls, num_classes: int, channels: int, T: int, rng: np.random.Generator, **kw) -> "MLPDenoiser":
        net = cls(num_classes, channels, T, **kw)
        F, Hd, out = net.n_features, net.hidden, 2 * channels
        embed = 0.5 * rng.standard_normal((num_classes + 1, net.embed_dim))
        embed[num_classes] = 0.0
        net.params = {
            "embed": embed,
            "w1": rng.standard_normal((F, Hd)) / math.sqrt(F),
            "b1": np.zeros(Hd),
            "w2": rng.standard_normal((Hd, out)) / math.sqrt(Hd) * 0.1,
            "b2": np.zeros(out),
        }
        return net

    def _features(self, x: np.ndarray, y: np.ndarray, t) -> np.ndarray:
        lead = y.shape
        t_arr = np.broadcast_to(np.asarray(t).reshape(np.shape(t) + (1,) * (len(lead) - np.ndim(t))), lead)
        return np.concatenate(
            [x, self.params["embed"][y], time_features(t_arr, self.T, self.n_freq)], axis=-1
        )

    def forward(self, x_t: np.ndarray, y_cells: np.ndarray, t) -> tuple[np.ndarray, np.ndarray, dict]:
        """Returns ``(eps, variance_logit, cache)``.

        ``t`` is a scalar or an array broadcastable against the leading
        (batch) axes of ``y_cells``.
        """
        y = np.asarray(y_cells, dtype=np.int64)
        feats = self._features(np.asarray(x_t, dtype=float), y, t)
        flat = feats.reshape(-1, self.n_features)
        h = np.tanh(flat @ self.params["w1"] + self.params["b1"])
        out = h @ self.params["w2"] + self.params["b2"]
        out = out.reshape(y.shape + (2 * self.channels,))
        cache = {"flat": flat, "h": h, "y": y}
        return out[..., : self.channels], out[..., self.channels:], cache

    def backward(self, cache: dict, d_eps: np.ndarray, d_var: np.ndarray | None) -> dict[str, np.ndarray]:
        """Parameter gradients given upstream gradients of both outputs."""
        if d_var is None:
            d_var = np.zeros_like(d_eps)
        d_out = np.concatenate([d_eps, d_var], axis=-1).reshape(-1, 2 * self.channels)
        flat, h, y = cache["flat"], cache["h"], cache["y"]
        g = {"w2": h.T @ d_out, "b2": d_out.sum(0)}
        d_h = d_out @ self.params["w2"].T
        d_pre = d_h * (1.0 - h * h)
        g["w1"] = flat.T @ d_pre
        g["b1"] = d_pre.sum(0)
        d_feat = d_pre @ self.params["w1"].T
        d_emb = d_feat[:, self.channels: self.channels + self.embed_dim]
        g_embed = np.zeros_like(self.params["embed"])
        np.add.at(g_embed, y.ravel(), d_emb)
        g_embed[self.num_classes] = 0.0
        g["embed"] = g_embed
        return g

    def __call__(self, x_t, y_cells, t):
        eps, var, _ = self.forward(x_t, y_cells, t)
        return eps, var

    # -- checkpoint -------------------------------------------------------

    def header(self) -> dict:
        return {
            "flavor": "mlp",
            "num_classes": self.num_classes,
            "channels": self.channels,
            "T": self.T,
            "embed_dim": self.embed_dim,
            "hidden": self.hidden,
            "n_freq": self.n_freq,
            "params": [{"name": n, "shape": list(self.params[n].shape)} for n in PARAM_NAMES],
            "dtype": "<f4",
        }

    def to_bytes(self, extra: dict | None = None) -> bytes:
        head = self.header()
        if extra:
            head["provenance"] = extra
        blob = b"".join(self.params[n].astype("<f4").tobytes() for n in PARAM_NAMES)
        return json.dumps(head).encode("utf-8") + b"\n" + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "MLPDenoiser":
        nl = data.find(b"\n")
        if nl < 0:
            raise MapFormatError("checkpoint lacks a JSON header line")
        head = json.loads(data[:nl].decode("utf-8"))
        if head.get("flavor") != "mlp":
            raise MapFormatError(f"not an mlp checkpoint: {head.get('flavor')!r}")
        blob = data[nl + 1:]
        net = cls(head["num_classes"], head["channels"], head["T"], head["embed_dim"], head["hidden"], head["n_freq"])
        off = 0
        for spec in head["params"]:
            n = int(np.prod(spec["shape"])) * 4
            if off + n > len(blob):
                raise MapFormatError("checkpoint parameter block is truncated")
            net.params[spec["name"]] = np.frombuffer(blob[off:off + n], dtype="<f4").reshape(spec["shape"]).astype(float)
            off += n
        if off != len(blob):
            raise MapFormatError("checkpoint has trailing bytes")
        return net

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        atomic_write_bytes(path, self.to_bytes(extra))


def load_denoiser(path: str | Path, image_sched: ImageSchedule) -> Denoiser:
    """Load an oracle spec (JSON) or an mlp checkpoint."""
    data = Path(path).read_bytes()
    try:
        obj = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return MLPDenoiser.from_bytes(data)
    if obj.get("flavor") != "oracle":
        raise MapFormatError(f"unknown denoiser flavor {obj.get('flavor')!r}")
    return OracleDenoiser(ToyDataSpec.from_json(obj), image_sched, obj.get("prior"))
