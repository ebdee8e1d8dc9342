"""The edge detector and the shift-field localizer.

Both are small fully convolutional nets with hand-wired backward passes.
The localizer's final conv is zero-initialized so an untrained localizer
emits an exactly zero field, which makes the warp the identity.
"""

import json

import numpy as np
from scipy import ndimage

from edgedrift import nn
from edgedrift.errors import ContractViolation
from edgedrift.fields import DisplacementField
from edgedrift.matching import ConfidentSet

CHECKPOINT_VERSION = 1


class EdgeDetector:
    """3 -> widths -> num_classes conv stack with ReLUs and a sigmoid head."""

    kind = "edge_detector"

    def __init__(self, num_classes, widths=(16, 32, 32), ksize=3, seed=0, dtype=np.float32):
        if num_classes < 1:
            raise ContractViolation(f"need at least one class, got {num_classes}")
        rng = np.random.default_rng(seed)
        chans = [3, *widths, num_classes]
        self.convs = [
            nn.Conv2D(chans[i], chans[i + 1], ksize, rng, dtype=dtype)
            for i in range(len(chans) - 1)
        ]
        self.relus = [nn.ReLU() for _ in range(len(self.convs) - 1)]
        self.sigmoid = nn.Sigmoid()
        self.num_classes = num_classes
        self.config = {
            "num_classes": num_classes,
            "widths": list(widths),
            "ksize": ksize,
        }

    def forward(self, images):
        x = images
        for conv, relu in zip(self.convs[:-1], self.relus):
            x = relu.forward(conv.forward(x))
        return self.sigmoid.forward(self.convs[-1].forward(x))

    def backward_from_logits(self, glogits):
        """Backward pass given the gradient at the pre-sigmoid activations."""
        g = self.convs[-1].backward(glogits)
        for conv, relu in zip(reversed(self.convs[:-1]), reversed(self.relus)):
            g = conv.backward(relu.backward(g))
        return g

    def backward(self, gprobs):
        return self.backward_from_logits(self.sigmoid.backward(gprobs))

    def detect(self, image):
        """Edge probabilities (H, W, C) for one (H, W, 3) image."""
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ContractViolation(f"expected an (H, W, 3) image, got {img.shape}")
        dtype = self.convs[0].w.dtype
        return self.forward(img.astype(dtype, copy=False)[None])[0]

    def params(self):
        return {f"conv{i}.{k}": v for i, c in enumerate(self.convs) for k, v in c.params().items()}

    def grads(self):
        return {f"conv{i}.{k}": v for i, c in enumerate(self.convs) for k, v in c.grads().items()}

    def zero_grad(self):
        for c in self.convs:
            c.zero_grad()


class FieldLocalizer:
    """Predicts a displacement field from the image, the detector's confident
    pixels and the noisy labels.

    Works at half resolution (pool, four convs with additive skips, zero-init
    head) and upsamples the two offset planes back bilinearly.  An optional
    fixed Gaussian (`output_smooth`, sigma in px) smooths the offset planes;
    the blur is linear and zero-preserving, so the identity start survives.
    """

    kind = "field_localizer"

    def __init__(
        self,
        num_classes,
        width=32,
        ksize=5,
        seed=0,
        dtype=np.float32,
        cap=0.0,
        output_smooth=0.0,
    ):
        if cap < 0:
            raise ContractViolation(f"cap must be >= 0, got {cap}")
        if output_smooth < 0:
            raise ContractViolation(f"output_smooth must be >= 0, got {output_smooth}")
        rng = np.random.default_rng(seed)
        in_ch = 3 + 2 * num_classes
        self.pool = nn.AvgPool2()
        self.conv1 = nn.Conv2D(in_ch, width, ksize, rng, dtype=dtype)
        self.conv2 = nn.Conv2D(width, width, ksize, rng, dtype=dtype)
        self.conv3 = nn.Conv2D(width, width, ksize, rng, dtype=dtype)
        self.head = nn.Conv2D(width, 2, ksize, zero_init=True, dtype=dtype)
        self.relu1, self.relu2, self.relu3 = nn.ReLU(), nn.ReLU(), nn.ReLU()
        self.up = nn.Upsample2()
        self.num_classes = num_classes
        self.cap = float(cap)  # optional tanh bound on offsets, 0 disables
        self.output_smooth = float(output_smooth)
        self._cap_tanh = None
        self.config = {
            "num_classes": num_classes,
            "width": width,
            "ksize": ksize,
            "cap": self.cap,
            "output_smooth": self.output_smooth,
        }

    def forward(self, images, confident_raster, noisy_labels):
        C = self.num_classes
        if confident_raster.shape[-1] != C or noisy_labels.shape[-1] != C:
            raise ContractViolation("channel counts do not match num_classes")
        dtype = self.conv1.w.dtype
        x = np.concatenate(
            [
                images.astype(dtype, copy=False),
                confident_raster.astype(dtype),
                noisy_labels.astype(dtype),
            ],
            axis=-1,
        )
        d = self.pool.forward(x)
        h1 = self.relu1.forward(self.conv1.forward(d))
        h2 = self.relu2.forward(self.conv2.forward(h1)) + h1
        h3 = self.relu3.forward(self.conv3.forward(h2)) + h2
        out = self.up.forward(self.head.forward(h3))
        if self.cap > 0:
            self._cap_tanh = np.tanh(out / self.cap)
            out = self.cap * self._cap_tanh
        if self.output_smooth > 0:
            s = self.output_smooth
            out = ndimage.gaussian_filter(out, sigma=(0, s, s, 0), mode="constant")
        return out

    def backward(self, gfield):
        if self.output_smooth > 0:
            # zero-padded symmetric kernel: the blur is its own adjoint
            s = self.output_smooth
            gfield = ndimage.gaussian_filter(gfield, sigma=(0, s, s, 0), mode="constant")
        if self.cap > 0:
            gfield = gfield * (1.0 - self._cap_tanh**2)
        g = self.head.backward(self.up.backward(gfield))
        g = self.conv3.backward(self.relu3.backward(g)) + g
        g = self.conv2.backward(self.relu2.backward(g)) + g
        g = self.conv1.backward(self.relu1.backward(g))
        return self.pool.backward(g)

    def localize(self, image, confident_raster, noisy_labels):
        """DisplacementField for a single image."""
        out = self.forward(
            np.asarray(image)[None], confident_raster[None], noisy_labels[None]
        )[0]
        return DisplacementField(
            out[..., 0].astype(np.float64), out[..., 1].astype(np.float64)
        )

    def params(self):
        layers = {"conv1": self.conv1, "conv2": self.conv2, "conv3": self.conv3, "head": self.head}
        return {f"{n}.{k}": v for n, l in layers.items() for k, v in l.params().items()}

    def grads(self):
        layers = {"conv1": self.conv1, "conv2": self.conv2, "conv3": self.conv3, "head": self.head}
        return {f"{n}.{k}": v for n, l in layers.items() for k, v in l.grads().items()}

    def zero_grad(self):
        for l in (self.conv1, self.conv2, self.conv3, self.head):
            l.zero_grad()


def extract_confident(probs, tau):
    """Pixels with probability strictly greater than tau, as a ConfidentSet."""
    p = np.asarray(probs)
    if p.ndim != 3:
        raise ContractViolation(f"expected (H, W, C) probabilities, got {p.shape}")
    if not 0 <= tau < 1:
        raise ContractViolation(f"tau must be in [0, 1), got {tau}")
    pix = np.argwhere(p > tau)
    conf = p[pix[:, 0], pix[:, 1], pix[:, 2]].astype(np.float64)
    return ConfidentSet(pix.astype(np.int64), conf, p.shape)


def save_checkpoint(path, model, extra=None):
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": model.config,
        "extra": extra or {},
    }
    arrays = {k.replace(".", "__"): v for k, v in model.params().items()}
    # write through a handle so numpy keeps the exact filename
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=json.dumps(meta, sort_keys=True), **arrays)


def load_checkpoint(path, expected_kind=None):
    """Returns (model, extra).  Rebuilds the model from its stored config."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        arrays = {k.replace("__", "."): data[k] for k in data.files if k != "__meta__"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {meta.get('version')}")
    kind = meta.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise ContractViolation(f"expected a {expected_kind} checkpoint, got {kind}")
    cfg = meta["config"]
    if kind == EdgeDetector.kind:
        model = EdgeDetector(cfg["num_classes"], tuple(cfg["widths"]), cfg["ksize"])
    elif kind == FieldLocalizer.kind:
        model = FieldLocalizer(
            cfg["num_classes"],
            cfg["width"],
            cfg["ksize"],
            cap=cfg.get("cap", 0.0),
            output_smooth=cfg.get("output_smooth", 0.0),
        )
    else:
        raise ContractViolation(f"unknown checkpoint kind {kind!r}")
    params = model.params()
    if set(params) != set(arrays):
        raise ContractViolation("checkpoint parameter names do not match the model")
    for k, p in params.items():
        if p.shape != arrays[k].shape:
            raise ContractViolation(f"shape mismatch for {k}")
        p[:] = arrays[k]
    return model, meta["extra"]
