"""Model assembly and training: generation stage, stacked Gabor residual
anti-aliasing blocks, task stage, loss, SGD with momentum, metrics, and
checkpoint serialization.
"""

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import antialias, fractal, gabor
from . import tensor as T
from .csi import CsiTensor, SegmentSpec, read_manifest, read_trace, segment
from .errors import ConfigurationError, DataError, DivergenceError, UsageError

CHECKPOINT_MAGIC = b"GRCK"
CHECKPOINT_VERSION = 1


@dataclass
class BlockConfig:
    width: int = 32
    gabor_kernel: int = 5
    blur: antialias.BlurSpec = field(default_factory=antialias.BlurSpec)
    fd: fractal.FdSpec = field(default_factory=fractal.FdSpec)
    reduction: int = 8
    freq_kernel: int = 7
    use_gabor: bool = True
    use_antialias: bool = True
    use_temporal_att: bool = True
    use_frequency_att: bool = True

    def __post_init__(self):
        if self.width < 1:
            raise ConfigurationError("block width must be >= 1")


@dataclass
class ModelConfig:
    classes: int
    lam: int = 8              # number of stacked blocks
    upsample_stride: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.lam < 1:
            raise ConfigurationError("lam (block count) must be >= 1")
        if self.classes < 2:
            raise ConfigurationError("need at least 2 classes")


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.lr < 0:
            raise ConfigurationError("lr must be non-negative")


def _conv_init(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)


class GraSensBlock:
    """One residual block: Gabor conv -> anti-aliased downsample -> conv,
    fractal attention gating, then blurred concat with the downsampled skip
    merged back to block width by a 1x1 conv.

    Disabled components keep shapes identical: attention becomes identity,
    anti-aliasing becomes naive strided subsampling, the Gabor layer becomes
    a plain trainable conv of the same size.
    """

    def __init__(self, cfg, seed):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        w = cfg.width
        nf = gabor.N_FILTERS
        if cfg.use_gabor:
            self.gabor_layer = gabor.init_grid(w, kernel_size=cfg.gabor_kernel,
                                               seed=int(rng.integers(2 ** 31)))
            self.plain_kernel = None
        else:
            self.gabor_layer = None
            self.plain_kernel = T.Tensor(_conv_init(rng, (nf, w, cfg.gabor_kernel, cfg.gabor_kernel)),
                                         requires_grad=True)
        self.trail_kernel = T.Tensor(_conv_init(rng, (w, nf, 3, 3)), requires_grad=True)
        self.trail_bias = T.Tensor(np.zeros(w), requires_grad=True)
        self.merge_kernel = T.Tensor(_conv_init(rng, (w, 2 * w, 1, 1)), requires_grad=True)
        self.merge_bias = T.Tensor(np.zeros(w), requires_grad=True)
        self.att_t = fractal.init_temporal(w, reduction=cfg.reduction,
                                           seed=int(rng.integers(2 ** 31))) \
            if cfg.use_temporal_att else None
        self.att_f = fractal.init_frequency(kernel_size=cfg.freq_kernel,
                                            seed=int(rng.integers(2 ** 31))) \
            if cfg.use_frequency_att else None
        self.predictors = {}
        if cfg.use_antialias and cfg.blur.mode == "predicted":
            k, G = cfg.blur.kernel_size, cfg.blur.groups
            for name, c_in in (("main", nf), ("skip", w), ("merge", 2 * w)):
                self.predictors[name] = antialias.init_predictor(
                    c_in, k=k, groups=G, seed=int(rng.integers(2 ** 31)))

    def _down(self, x, which):
        if self.cfg.use_antialias:
            spec = antialias.BlurSpec(kernel_size=self.cfg.blur.kernel_size, stride=2,
                                      mode=self.cfg.blur.mode, groups=self.cfg.blur.groups)
            return antialias.blur(x, spec, self.predictors.get(which))
        return T.subsample(x, 2)

    def forward(self, x):
        if min(x.shape[1], x.shape[2]) < 2:
            raise ConfigurationError(
                f"spatial extent {x.shape[1:]} too small to downsample; "
                "use a smaller lam or a larger input")
        if self.cfg.use_gabor:
            g = gabor.gabor_conv(x, self.gabor_layer)
        else:
            g = T.conv2d(x, self.plain_kernel, stride=1, padding=self.cfg.gabor_kernel // 2)
        d = self._down(g, "main")
        f0 = T.add(T.conv2d(d, self.trail_kernel, stride=1, padding=1),
                   T.reshape(self.trail_bias, (self.cfg.width, 1, 1)))

        f_att = f0
        if self.att_t is not None:
            f_att = T.mul(fractal.temporal_attention(f_att, self.att_t, self.cfg.fd), f_att)
        if self.att_f is not None:
            f_att = T.mul(fractal.frequency_attention(f_att, self.att_f, self.cfg.fd), f_att)

        skip = self._down(x, "skip")
        cat = T.concat_channels(f_att, skip)
        if self.cfg.use_antialias:
            spec = antialias.BlurSpec(kernel_size=self.cfg.blur.kernel_size, stride=1,
                                      mode=self.cfg.blur.mode, groups=self.cfg.blur.groups)
            cat = antialias.blur(cat, spec, self.predictors.get("merge"))
        return T.add(T.conv2d(cat, self.merge_kernel, stride=1, padding=0),
                     T.reshape(self.merge_bias, (self.cfg.width, 1, 1)))

    def parameters(self):
        out = {}
        if self.gabor_layer is not None:
            for k, v in self.gabor_layer.parameters().items():
                out[f"gabor.{k}"] = v
        else:
            out["plain.kernel"] = self.plain_kernel
        out["trail.kernel"] = self.trail_kernel
        out["trail.bias"] = self.trail_bias
        out["merge.kernel"] = self.merge_kernel
        out["merge.bias"] = self.merge_bias
        if self.att_t is not None:
            for k, v in self.att_t.parameters().items():
                out[f"att_t.{k}"] = v
        if self.att_f is not None:
            for k, v in self.att_f.parameters().items():
                out[f"att_f.{k}"] = v
        for name, pred in self.predictors.items():
            for k, v in pred.parameters().items():
                out[f"pred_{name}.{k}"] = v
        return out


def _smoothing_matrix(n):
    """[1,2,1]/4 smoothing of a length-n vector as a matrix.

    Edge-replicate padding: reflect padding would average a 2-logit vector
    into identical entries, zeroing every gradient. Edge replication keeps
    DC gain 1 and the map invertible for any n >= 2.
    """
    m = np.zeros((n, n))
    for i in range(n):
        for off, wgt in ((-1, 0.25), (0, 0.5), (1, 0.25)):
            j = min(max(i + off, 0), n - 1)
            m[i, j] += wgt
    return m


class GraSensModel:
    """Generation stage + lam stacked blocks + task stage."""

    def __init__(self, model_cfg, block_cfg, in_channels, input_hw, task_blur=True):
        self.model_cfg = model_cfg
        self.block_cfg = block_cfg
        self.in_channels = in_channels
        self.input_hw = tuple(input_hw)
        self.task_blur = task_blur
        self._validate_sizes()
        rng = np.random.default_rng(model_cfg.seed)
        s = model_cfg.upsample_stride
        self.gen_kernel = T.Tensor(
            _conv_init(rng, (in_channels, block_cfg.width, 2 * s, 2 * s)), requires_grad=True)
        self.blocks = [GraSensBlock(block_cfg, seed=int(rng.integers(2 ** 31)))
                       for _ in range(model_cfg.lam)]
        self.task_weight = T.Tensor(
            rng.normal(scale=1.0 / np.sqrt(block_cfg.width),
                       size=(model_cfg.classes, block_cfg.width)), requires_grad=True)
        self.task_bias = T.Tensor(np.zeros(model_cfg.classes), requires_grad=True)
        self._smooth = _smoothing_matrix(model_cfg.classes) if task_blur else None

    def _validate_sizes(self):
        h, w = self.input_hw
        h *= self.model_cfg.upsample_stride
        w *= self.model_cfg.upsample_stride
        need = 4 if self.block_cfg.use_frequency_att else 2
        for mu in range(self.model_cfg.lam):
            if min(h, w) < 2:
                raise ConfigurationError(
                    f"block {mu} would see spatial extents ({h},{w}); "
                    "use a smaller lam or a larger input")
            h, w = -(-h // 2), -(-w // 2)
            if self.block_cfg.use_frequency_att and min(h, w) < need:
                raise ConfigurationError(
                    f"block {mu} output ({h},{w}) too small for 7x7 reflect-padded "
                    "frequency attention; use a smaller lam or a larger input")

    def generation_stage(self, x):
        return T.deconv2d(x, self.gen_kernel, stride=self.model_cfg.upsample_stride)

    def forward(self, x):
        """x: CsiTensor or (C,H,W) array -> logits Tensor of length classes."""
        if isinstance(x, CsiTensor):
            x = x.data
        if x.shape[0] != self.in_channels or x.shape[1:] != self.input_hw:
            raise ConfigurationError(
                f"input shape {x.shape} incompatible with model built for "
                f"({self.in_channels}, {self.input_hw[0]}, {self.input_hw[1]})")
        # standardize so activation scales (and hence usable learning rates)
        # do not depend on the raw CSI magnitude range
        x = (x - x.mean()) / (x.std() + 1e-8)
        f = self.generation_stage(T.Tensor(x))
        for block in self.blocks:
            f = block.forward(f)
        pooled = T.mean_spatial(f)
        logits = T.linear(pooled, self.task_weight, self.task_bias)
        if self._smooth is not None:
            logits = T.matvec_const(self._smooth, logits)
        return logits

    def predict(self, x):
        return int(np.argmax(self.forward(x).data))

    def parameters(self):
        out = {"gen.kernel": self.gen_kernel}
        for i, block in enumerate(self.blocks):
            for k, v in block.parameters().items():
                out[f"block{i}.{k}"] = v
        out["task.weight"] = self.task_weight
        out["task.bias"] = self.task_bias
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()


def loss_fn(logits, label):
    """Softmax cross-entropy of one logit vector against the true class."""
    return T.cross_entropy(logits, label)


def batch_loss(model, samples, predictions=None):
    """Mean cross-entropy over a list of (input, label) pairs.

    When a `predictions` list is given, the argmax of each logit vector is
    appended to it (saves a second pass when tracking train accuracy).
    """
    total = None
    for x, label in samples:
        logits = model.forward(x)
        if predictions is not None:
            predictions.append(int(np.argmax(logits.data)))
        term = loss_fn(logits, label)
        total = term if total is None else T.add(total, term)
    return total * (1.0 / len(samples))


def sgd_momentum_step(params, state, cfg):
    """Classic momentum: v <- momentum*v + grad; p <- p - lr*v.

    `state` maps parameter names to velocity arrays and is created on first
    use. Parameters with no gradient this step are skipped.
    """
    for name, p in params.items():
        if p.grad is None:
            continue
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = cfg.momentum * v + p.grad
        state[name] = v
        p.data = p.data - cfg.lr * v
    return state


def metrics(predictions, truths, n_classes=None):
    """Accuracy, per-class precision (None when undefined), confusion matrix."""
    predictions = np.asarray(predictions, dtype=int)
    truths = np.asarray(truths, dtype=int)
    if predictions.size == 0 or predictions.shape != truths.shape:
        raise UsageError("metrics needs equal-length, non-empty prediction/truth lists")
    if n_classes is None:
        n_classes = int(max(predictions.max(), truths.max())) + 1
    confusion = np.zeros((n_classes, n_classes), dtype=int)
    for p, t in zip(predictions, truths):
        confusion[t, p] += 1
    accuracy = float((predictions == truths).mean())
    precision = {}
    for c in range(n_classes):
        predicted = confusion[:, c].sum()
        precision[c] = float(confusion[c, c] / predicted) if predicted > 0 else None
    return {"accuracy": accuracy, "precision": precision, "confusion": confusion}


def precision_macro(precision):
    defined = [v for v in precision.values() if v is not None]
    return float(np.mean(defined)) if defined else float("nan")


# -- dataset assembly --------------------------------------------------------

def load_dataset(manifest_path, spec):
    """Manifest JSONL -> {split: [(array, label), ...]} via segmentation."""
    import os
    entries = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    splits = {}
    for e in entries:
        path = e["path"]
        if not os.path.isabs(path):
            path = os.path.join(base, path)
        trace = read_trace(path)
        label = e["label"]
        for seg in segment(trace, spec):
            splits.setdefault(e["split"], []).append((seg.data, label))
    return splits


# -- checkpoint ---------------------------------------------------------------

def _config_dict(model):
    return {
        "model": asdict(model.model_cfg),
        "block": asdict(model.block_cfg),
        "in_channels": model.in_channels,
        "input_hw": list(model.input_hw),
        "task_blur": model.task_blur,
    }


def model_from_config(cfg):
    block = dict(cfg["block"])
    block["blur"] = antialias.BlurSpec(**block["blur"])
    fd = dict(block["fd"])
    fd["scales"] = tuple(fd["scales"])
    block["fd"] = fractal.FdSpec(**fd)
    return GraSensModel(
        ModelConfig(**cfg["model"]),
        BlockConfig(**block),
        in_channels=cfg["in_channels"],
        input_hw=tuple(cfg["input_hw"]),
        task_blur=cfg.get("task_blur", True),
    )


def save_checkpoint(model, path, optimizer_state=None, rng_state=None, extra=None):
    params = model.parameters()
    index = {}
    blobs = []
    offset = 0
    entries = list(params.items())
    if optimizer_state:
        entries += [(f"opt.{k}", T.Tensor(v)) for k, v in optimizer_state.items()]
    for name, p in entries:
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        blobs.append(arr.tobytes())
        offset += arr.size
    header = {
        "config": _config_dict(model),
        "index": index,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns (model, optimizer_state, header)."""
    from .errors import ParseError
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"bad checkpoint magic {raw[:4]!r}", offset=0)
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    header = json.loads(raw[16:16 + hlen])
    payload = np.frombuffer(raw, dtype="<f8", offset=16 + hlen)
    model = model_from_config(header["config"])
    params = model.parameters()
    optimizer_state = {}
    for name, meta in header["index"].items():
        shape = tuple(meta["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = payload[meta["offset"]:meta["offset"] + size].reshape(shape).copy()
        if name.startswith("opt."):
            optimizer_state[name[4:]] = arr
        else:
            params[name].data = arr
    return model, optimizer_state, header


# -- training loop -------------------------------------------------------------

def evaluate(model, samples):
    if not samples:
        raise DataError("evaluation split is empty")
    losses, preds, truths = [], [], []
    for x, label in samples:
        logits = model.forward(x)
        losses.append(float(loss_fn(logits, label).data))
        preds.append(int(np.argmax(logits.data)))
        truths.append(label)
    m = metrics(preds, truths, n_classes=model.model_cfg.classes)
    m["loss"] = float(np.mean(losses))
    return m


def train(splits, model, cfg, metrics_path=None, checkpoint_path=None, log_fn=None):
    """SGD-with-momentum training over the 'train' split, validated on 'val'.

    Deterministic given cfg.seed (data order) and the model seed. Returns the
    per-epoch metrics rows; the best-validation checkpoint is written to
    checkpoint_path when given.
    """
    if "train" not in splits or not splits["train"]:
        raise DataError("dataset has no train split")
    train_set = splits["train"]
    val_set = splits.get("val", [])
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = {}
    rows = []
    best_acc = -1.0
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        epoch_losses = []
        preds, truths = [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            model.zero_grad()
            loss = batch_loss(model, batch, predictions=preds)
            truths.extend(label for _, label in batch)
            step += 1
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch})")
            loss.backward()
            sgd_momentum_step(params, state, cfg)
            epoch_losses.append(float(loss.data))
        # train accuracy is measured on the fly, with parameters moving
        train_m = metrics(preds, truths, n_classes=model.model_cfg.classes)
        rows.append({"epoch": epoch, "split": "train", "loss": float(np.mean(epoch_losses)),
                     "accuracy": train_m["accuracy"],
                     "precision_macro": precision_macro(train_m["precision"])})
        if val_set:
            val_eval = evaluate(model, val_set)
            rows.append({"epoch": epoch, "split": "val", "loss": val_eval["loss"],
                         "accuracy": val_eval["accuracy"],
                         "precision_macro": precision_macro(val_eval["precision"])})
            if checkpoint_path and val_eval["accuracy"] > best_acc:
                best_acc = val_eval["accuracy"]
                save_checkpoint(model, checkpoint_path, optimizer_state=state,
                                rng_state=rng.bit_generator.state,
                                extra={"epoch": epoch, "val_accuracy": best_acc})
        elif checkpoint_path:
            save_checkpoint(model, checkpoint_path, optimizer_state=state,
                            rng_state=rng.bit_generator.state, extra={"epoch": epoch})
        if log_fn:
            log_fn(rows[-1])
    if metrics_path:
        write_metrics_csv(rows, metrics_path)
    return rows


def write_metrics_csv(rows, path):
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "split", "loss", "accuracy",
                                                "precision_macro"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v)
                             for k, v in row.items()})
