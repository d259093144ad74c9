"""A small encoder-decoder whose aggregation nodes are attentive fusions.

This is a deliberately simplified host network, not DLA. Layout for one
input scale (``w1..w4`` are the encoder widths):

    enc1 (stride 1, w1) -> enc2 (2, w2) -> enc3 (4, w3) -> enc4 (8, w4)
    node3 = merge(enc3, up(relu(lat3(enc4))))
    node2 = merge(enc2, up(relu(lat2(node3))))
    node1 = merge(enc1, up(relu(lat1(node2))))
    final = multi-merge(up(p3(node3)), up(p2(node2)), node1)

The lateral convs are 3x3 and run at the coarser of the two resolutions.
``merge`` is attentive binary fusion (shallow input first) in ``afa`` mode,
a sum of 1x1 projections in ``sum`` mode and a 1x1 conv over the
concatenation in ``concat-proj`` mode. ``multi-merge`` is the matching
multi-input operator, with inputs ordered by aggregation depth.

Heads on ``final``: the classifier (1x1), a plain linear auxiliary
classifier standing in for the object-context head, and a two-layer 3x3
logit head for scale-space rendering (separate per scale). One 1x1
auxiliary head sits on each of enc4, node3, node2 and node1. All per-scale
outputs are resized to the label resolution and fused across scales with
SSR.

Inputs are centred by subtracting 0.5. There is no normalisation layer,
so ``calibrate`` rescales every plain convolution once, in forward order,
to a target output RMS on one batch (layer-sequential unit-variance init).
Without it the gated merges, which scale their inputs by about 1/4 at
initialisation, shrink the logits roughly 50x relative to sum fusion.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .. import tensor as T
from ..fusion import ChannelAttentionParams, SpatialAttentionParams, binary_fuse, multi_fuse
from ..ssr import SsrState, ssr_alphas, ssr_fuse
from ..tensor import Tensor
from .config import ToyConfig

__all__ = ["ToyModel", "ModelOutput"]


@dataclass
class ModelOutput:
    final: Tensor  # SSR-fused classifier logits at label resolution
    per_scale: List[Tensor]
    aux_fused: Tensor
    heads_fused: List[Tensor]
    alphas: List[Tensor]
    # per scale: name -> attention map, filled only when tracing
    attention: List[Dict[str, Tensor]] = field(default_factory=list)
    trace: List[Dict[str, Tensor]] = field(default_factory=list)


class ToyModel:
    def __init__(self, config: ToyConfig, rng: np.random.Generator = None):
        self.config = config
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._calibrating = None
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self._build(rng)

    # -- construction ---------------------------------------------------

    def _add(self, name: str, arr) -> Tensor:
        t = Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _conv(self, name, cin, cout, k, rng, gain=1.0):
        std = gain * np.sqrt(2.0 / (cin * k * k))
        self._add(f"{name}.w", rng.standard_normal((cout, cin, k, k)) * std)
        self._add(f"{name}.b", np.zeros(cout))

    def _attention(self, name, c, rng):
        cfg = self.config
        mid = cfg.attn_mid or None
        sp = SpatialAttentionParams.create(c, mid, rng=rng, name=f"{name}.sa", out_scale=cfg.attn_out_scale)
        cp = ChannelAttentionParams.create(c, cfg.reduction, rng=rng, name=f"{name}.ca", out_scale=cfg.attn_out_scale)
        for t in sp.parameters() + cp.parameters():
            t.data = t.data.astype(np.float32)
            self.params[t.name] = t

    def _merge_params(self, name, c, n_inputs, rng):
        mode = self.config.fusion
        if mode == "afa":
            if n_inputs == 2:
                self._attention(name, c, rng)
            else:
                for i in range(n_inputs):
                    self._attention(f"{name}.in{i}", c, rng)
        elif mode == "sum":
            for i in range(n_inputs):
                self._conv(f"{name}.proj{i}", c, c, 1, rng, gain=(1.0 / n_inputs) ** 0.5)
        else:
            self._conv(f"{name}.proj", c * n_inputs, c, 1, rng)

    def _build(self, rng):
        cfg = self.config
        w1, w2, w3, w4 = cfg.widths
        k = cfg.num_classes
        self._conv("enc1", 3, w1, 3, rng)
        self._conv("enc2", w1, w2, 3, rng)
        self._conv("enc3", w2, w3, 3, rng)
        self._conv("enc4", w3, w4, 3, rng)
        for name, deep, shallow in (("node3", w4, w3), ("node2", w3, w2), ("node1", w2, w1)):
            self._conv(f"{name}.lat", deep, shallow, 3, rng)
            self._merge_params(f"{name}.merge", shallow, 2, rng)
        for name, c in (("final.p3", w3), ("final.p2", w2)):
            self._conv(name, c, w1, 1, rng)
        self._merge_params("final.merge", w1, 3, rng)
        self._conv("cls", w1, k, 1, rng, gain=0.5)
        self._conv("aux", w1, k, 1, rng, gain=0.5)
        for j, c in enumerate((w4, w3, w2, w1)):
            self._conv(f"head{j}", c, k, 1, rng, gain=0.5)
        mid = max(w1 // 4, 1)
        for s in range(len(cfg.scales)):
            self._conv(f"ssr{s}.conv1", w1, mid, 3, rng)
            self._conv(f"ssr{s}.conv2", mid, 1, 3, rng, gain=0.1)

    # -- helpers ----------------------------------------------------------

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def attention_parameters(self) -> List[Tensor]:
        return [p for n, p in self.params.items() if ".sa." in n or ".ca." in n]

    def _c(self, name, x, stride=1, padding=None):
        w = self.params[f"{name}.w"]
        pad = w.shape[2] // 2 if padding is None else padding
        out = T.conv2d(x, w, self.params[f"{name}.b"], stride=stride, padding=pad)
        cal = self._calibrating
        if cal is not None and name not in cal and not name.endswith(".conv2"):
            cal.add(name)
            rms = float(np.sqrt(np.mean(out.data.astype(np.float64) ** 2)))
            target = self.LOGIT_RMS if name in self._logit_convs() else self.HIDDEN_RMS
            if rms > 0:
                w.data *= np.float32(target / rms)
                out = T.conv2d(x, w, self.params[f"{name}.b"], stride=stride, padding=pad)
        return out

    HIDDEN_RMS = 1.0
    LOGIT_RMS = 0.5

    def _logit_convs(self):
        return {"cls", "aux", "head0", "head1", "head2", "head3"}

    def calibrate(self, images) -> None:
        """Rescale conv weights so each output has the target RMS on ``images``.

        Shared convs are calibrated on the finest scale, which is the label
        resolution; a second pass covers the remaining per-scale SSR convs.
        The SSR logit convs (``ssr*.conv2``) keep their small init so every
        mode starts from the same scale weighting. Biases are zero at init,
        so scaling the weights scales the output exactly.
        """
        self._calibrating = set()
        try:
            with T.no_grad():
                x = T.add_scalar(Tensor(np.asarray(images, dtype=np.float32)), -0.5)
                self.forward_scale(x, len(self.config.scales) - 1)
                self.forward(images)
        finally:
            self._calibrating = None

    def _sp(self, name):
        p = self.params
        return SpatialAttentionParams(p[f"{name}.sa.conv1.w"], p[f"{name}.sa.conv1.b"], p[f"{name}.sa.conv2.w"], p[f"{name}.sa.conv2.b"])

    def _cp(self, name):
        p = self.params
        return ChannelAttentionParams(p[f"{name}.ca.fc1.w"], p[f"{name}.ca.fc1.b"], p[f"{name}.ca.fc2.w"], p[f"{name}.ca.fc2.b"])

    def _merge2(self, name, f_s, f_d, attention):
        mode = self.config.fusion
        if mode == "afa":
            out, (a_s, _) = binary_fuse(f_s, f_d, self._sp(name), self._cp(name), return_attention=True)
            attention[f"{name}.a_s"] = a_s
            return out
        if mode == "sum":
            return self._c(f"{name}.proj0", f_s) + self._c(f"{name}.proj1", f_d)
        return self._c(f"{name}.proj", T.concat([f_s, f_d]))

    def _merge_many(self, name, feats, attention):
        mode = self.config.fusion
        if mode == "afa":
            params = [(self._sp(f"{name}.in{i}"), self._cp(f"{name}.in{i}")) for i in range(len(feats))]
            out, _, spatial = multi_fuse(feats, params, return_attention=True)
            for i, a in enumerate(spatial):
                attention[f"{name}.in{i}.a_s"] = a
            return out
        if mode == "sum":
            out = None
            for i, f in enumerate(feats):
                term = self._c(f"{name}.proj{i}", f)
                out = term if out is None else out + term
            return out
        return self._c(f"{name}.proj", T.concat(list(feats)))

    @staticmethod
    def _up(x, h, w):
        return T.bilinear_resize(x, h, w)

    # -- forward ----------------------------------------------------------

    def forward_scale(self, image: Tensor, s: int, trace: bool = False):
        """Run one scale; returns per-scale logits, aux, heads, ssr logit and attention."""
        attention: Dict[str, Tensor] = {}
        record: Dict[str, Tensor] = {}
        e1 = T.relu(self._c("enc1", image))
        e2 = T.relu(self._c("enc2", e1, stride=2))
        e3 = T.relu(self._c("enc3", e2, stride=2))
        e4 = T.relu(self._c("enc4", e3, stride=2))
        deep = e4
        nodes = {}
        for name, shallow in (("node3", e3), ("node2", e2), ("node1", e1)):
            h, w = shallow.shape[2:]
            f_d = self._up(T.relu(self._c(f"{name}.lat", deep)), h, w)
            deep = self._merge2(f"{name}.merge", shallow, f_d, attention)
            if trace:
                record[f"{name}.f_s"], record[f"{name}.f_d"], record[f"{name}.fused"] = shallow, f_d, deep
            nodes[name] = deep
        h, w = e1.shape[2:]
        feats = [
            self._up(self._c("final.p3", nodes["node3"]), h, w),
            self._up(self._c("final.p2", nodes["node2"]), h, w),
            nodes["node1"],
        ]
        final = self._merge_many("final.merge", feats, attention)
        if trace:
            for i, f in enumerate(feats):
                record[f"final.in{i}"] = f
            record["final.fused"] = final
        logits = self._c("cls", final)
        aux = self._c("aux", final)
        heads = [self._c(f"head{j}", f) for j, f in enumerate((e4, nodes["node3"], nodes["node2"], nodes["node1"]))]
        y = self._c(f"ssr{s}.conv2", T.relu(self._c(f"ssr{s}.conv1", final)))
        return logits, aux, heads, y, attention, record

    def forward(self, images, trace: bool = False) -> ModelOutput:
        """Multi-scale forward pass; every output is at the input resolution."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        x = T.add_scalar(x, -0.5)
        n, _, h, w = x.shape
        per_scale, auxes, heads, ys, attention, records = [], [], [], [], [], []
        for s, factor in enumerate(self.config.scales):
            sh, sw = max(int(round(h * factor)), 8), max(int(round(w * factor)), 8)
            xs = x if (sh, sw) == (h, w) else T.bilinear_resize(x, sh, sw)
            logits, aux, hd, y, att, rec = self.forward_scale(xs, s, trace)
            per_scale.append(self._up(logits, h, w))
            auxes.append(self._up(aux, h, w))
            heads.append([self._up(p, h, w) for p in hd])
            ys.append(self._up(y, h, w))
            attention.append(att)
            records.append(rec)
        state = SsrState(ys, self.config.phi)
        alphas = ssr_alphas(state)
        final = ssr_fuse(per_scale, state, alphas)
        aux_fused = ssr_fuse(auxes, state, alphas)
        heads_fused = [ssr_fuse([heads[s][j] for s in range(len(heads))], state, alphas) for j in range(4)]
        for s, a in enumerate(alphas):
            attention[s]["ssr.alpha"] = a
        return ModelOutput(final, per_scale, aux_fused, heads_fused, alphas, attention, records)

    def predict(self, images) -> np.ndarray:
        with T.no_grad():
            out = self.forward(images)
        return out.final.data.argmax(axis=1)

    # -- persistence -----------------------------------------------------------

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter table mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} does not match model {self.params[k].shape}")
            self.params[k].data = np.ascontiguousarray(arr, dtype=np.float32)
