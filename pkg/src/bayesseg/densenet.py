"""FC-DenseNet encoder-decoder with train / deterministic / MC-dropout forward modes."""

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .io import FormatError, decode_btsr, encode_btsr
from .rng import keyed_generator

CHECKPOINT_MAGIC = b"BSEGPAR1"
# init streams are offset so they never alias dropout streams of the same seed
_INIT_STREAM_BASE = 1 << 32


class SpecError(ValueError):
    """An invalid :class:`NetworkSpec`."""


@dataclass(frozen=True)
class NetworkSpec:
    db_layer_counts: tuple = (2, 3, 4, 5, 6, 8, 6, 5, 4, 3, 2)
    growth_rate: int = 16
    stem_filters: int = 48
    dropout_p: float = 0.5
    num_classes: int = 2
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "db_layer_counts", tuple(int(m) for m in self.db_layer_counts))
        self.validate()

    def validate(self):
        counts = self.db_layer_counts
        if len(counts) % 2 != 1:
            raise SpecError(f"db_layer_counts must have odd length, got {len(counts)}")
        if any(m < 1 for m in counts):
            raise SpecError(f"every dense block needs at least one module, got {counts}")
        if self.growth_rate < 1:
            raise SpecError(f"growth_rate must be positive, got {self.growth_rate}")
        if self.stem_filters < 1:
            raise SpecError(f"stem_filters must be positive, got {self.stem_filters}")
        if not 0 <= self.dropout_p < 1:
            raise SpecError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.num_classes < 2:
            raise SpecError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise SpecError(f"input_channels must be positive, got {self.input_channels}")

    @property
    def n_pools(self):
        return (len(self.db_layer_counts) - 1) // 2

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return NetworkSpec(**values)

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        raw = {}
        for line in text.splitlines():
            if "=" in line:
                key, value = line.split("=", 1)
                raw[key.strip()] = value.strip()
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw):
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw[f.name]
            if f.name == "db_layer_counts":
                kwargs[f.name] = tuple(int(v) for v in str(value).split(",") if v.strip())
            elif f.name == "dropout_p":
                kwargs[f.name] = float(value)
            else:
                kwargs[f.name] = int(value)
        return cls(**kwargs)


MODEL_1_2 = NetworkSpec(db_layer_counts=(2, 3, 4, 5, 6, 8, 6, 5, 4, 3, 2))
MODEL_3 = NetworkSpec(db_layer_counts=(4, 5, 7, 10, 12, 15, 12, 10, 7, 5, 4), num_classes=6)
TINY = NetworkSpec(db_layer_counts=(1, 2, 2, 2, 1), growth_rate=4, stem_filters=8)

PROFILES = {"model12": MODEL_1_2, "model3": MODEL_3, "tiny": TINY}


@dataclass(frozen=True)
class ForwardMode:
    """How to run a forward pass.

    ``train``: batch-statistics BN, dropout keyed by ``(seed, site, step)``.
    ``deterministic``: running BN stats, no dropout, RNG never touched.
    ``mc``: running BN stats, dropout keyed by ``(seed, site, n)`` for the
    sample index ``n`` of each batch element.
    """

    kind: str = "deterministic"
    seed: int = 0
    step: int = 0
    samples: tuple = ()

    @classmethod
    def train(cls, seed, step):
        return cls("train", seed=seed, step=step)

    @classmethod
    def mc(cls, seed, samples):
        return cls("mc", seed=seed, samples=tuple(samples))


DETERMINISTIC = ForwardMode()


@dataclass
class NetworkParams:
    """Trainable tensors and BN running statistics, keyed by layer identifier."""

    tensors: dict = field(default_factory=dict)
    bn_states: dict = field(default_factory=dict)
    dropout_sites: dict = field(default_factory=dict)
    _frozen: dict = field(default=None, repr=False)

    def trainable(self):
        return list(self.tensors.values())

    def frozen(self):
        """Gradient-free views of the tensors (cheap inference)."""
        if self._frozen is None or any(self._frozen[k].data is not t.data for k, t in self.tensors.items()):
            self._frozen = {k: T.Tensor(t.data, dtype=t.data.dtype) for k, t in self.tensors.items()}
        return self._frozen

    def state_arrays(self):
        """Every array that defines the network, in deterministic order."""
        out = [(name, t.data) for name, t in self.tensors.items()]
        for name, st in self.bn_states.items():
            out.append((f"{name}/running_mean", st.mean))
            out.append((f"{name}/running_var", st.var))
        return out

    def copy(self):
        clone = NetworkParams(dropout_sites=dict(self.dropout_sites))
        for name, t in self.tensors.items():
            clone.tensors[name] = T.Tensor(t.data.copy(), requires_grad=True, dtype=t.data.dtype)
        for name, st in self.bn_states.items():
            new = T.BatchNormState(len(st.mean), st.momentum, dtype=st.mean.dtype)
            new.mean[...] = st.mean
            new.var[...] = st.var
            clone.bn_states[name] = new
        return clone

    def count(self):
        return int(sum(t.data.size for t in self.tensors.values()))

    def to_bytes(self):
        return b"".join(a.tobytes() for _, a in self.state_arrays())


# ---------------------------------------------------------------------------
# construction


def channel_plan(spec):
    """Channel count at every stage, by pure arithmetic.

    Returns a dict with ``skips``, ``bottleneck_in``, ``bottleneck_new``,
    ``up_inputs``, ``up_new`` and ``pre_classifier``.
    """
    counts, k, p = spec.db_layer_counts, spec.growth_rate, spec.n_pools
    c = spec.stem_filters
    skips = []
    for m in counts[:p]:
        c += m * k
        skips.append(c)
    bottleneck_in, new = c, counts[p] * k
    bottleneck_new = new
    up_inputs, up_new = [], []
    for i, m in enumerate(counts[p + 1:]):
        c = new + skips[p - 1 - i]
        up_inputs.append(c)
        new = m * k
        up_new.append(new)
    return {
        "skips": skips,
        "bottleneck_in": bottleneck_in,
        "bottleneck_new": bottleneck_new,
        "up_inputs": up_inputs,
        "up_new": up_new,
        "pre_classifier": up_inputs[-1] + up_new[-1] if up_inputs else bottleneck_in + bottleneck_new,
    }


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build(spec, init_seed=0):
    """Initialize parameters: He-uniform kernels, zero biases/beta, unit gamma."""
    if not isinstance(spec, NetworkSpec):
        raise SpecError(f"build needs a NetworkSpec, got {type(spec).__name__}")
    spec.validate()
    dtype = T.get_dtype()
    params = NetworkParams()
    n_kernels = [0]

    def conv(name, kh, kw, cin, cout):
        rng = keyed_generator(init_seed, _INIT_STREAM_BASE + n_kernels[0])
        n_kernels[0] += 1
        params.tensors[f"{name}/W"] = T.Tensor(
            _he_uniform(rng, (kh, kw, cin, cout), kh * kw * cin, dtype), requires_grad=True)
        params.tensors[f"{name}/b"] = T.Tensor(np.zeros(cout, dtype), requires_grad=True)

    def bn(name, c):
        params.tensors[f"{name}/gamma"] = T.Tensor(np.ones(c, dtype), requires_grad=True)
        params.tensors[f"{name}/beta"] = T.Tensor(np.zeros(c, dtype), requires_grad=True)
        params.bn_states[name] = T.BatchNormState(c, dtype=dtype)

    def site(name):
        params.dropout_sites[name] = len(params.dropout_sites)

    def block(idx, c, m):
        for j in range(m):
            name = f"db{idx}/m{j}"
            bn(f"{name}/bn", c)
            conv(f"{name}/conv", 3, 3, c, spec.growth_rate)
            site(f"{name}/drop")
            c += spec.growth_rate
        return c

    counts, p, k = spec.db_layer_counts, spec.n_pools, spec.growth_rate
    conv("stem", 3, 3, spec.input_channels, spec.stem_filters)
    c = spec.stem_filters
    skips = []
    for i in range(p):
        c = block(i, c, counts[i])
        skips.append(c)
        bn(f"td{i}/bn", c)
        conv(f"td{i}/conv", 1, 1, c, c)
        site(f"td{i}/drop")
    block(p, c, counts[p])
    new = counts[p] * k
    for i in range(p):
        conv(f"tu{i}", 3, 3, new, new)
        c = new + skips[p - 1 - i]
        block(p + 1 + i, c, counts[p + 1 + i])
        new = counts[p + 1 + i] * k
    final = c + new if p else spec.stem_filters + new
    conv("classifier", 1, 1, final, spec.num_classes)
    return params


# ---------------------------------------------------------------------------
# forward


class _Runner:
    def __init__(self, params, spec, mode, trace):
        self.spec = spec
        self.mode = mode
        self.trace = trace
        self.params = params
        self.t = params.tensors if mode.kind == "train" else params.frozen()
        if mode.kind not in ("train", "deterministic", "mc"):
            raise ValueError(f"unknown forward mode {mode.kind!r}")

    def record(self, name, x):
        if self.trace is not None:
            self.trace.append((name, x.shape))

    def conv(self, name, x, padding="same"):
        return T.conv2d(x, self.t[f"{name}/W"], self.t[f"{name}/b"], padding=padding)

    def bn(self, name, x):
        bn_mode = "train" if self.mode.kind == "train" else "infer"
        return T.batch_norm(x, self.t[f"{name}/gamma"], self.t[f"{name}/beta"],
                            self.params.bn_states[name], mode=bn_mode)

    def drop(self, name, x):
        p = self.spec.dropout_p
        if p == 0 or self.mode.kind == "deterministic":
            return x
        stream = self.params.dropout_sites[name]
        if self.mode.kind == "train":
            key = (self.mode.seed, stream, self.mode.step)
        else:
            key = [(self.mode.seed, stream, n) for n in self.mode.samples]
        return T.dropout(x, p, key)

    def module(self, name, x):
        h = T.relu(self.bn(f"{name}/bn", x))
        return self.drop(f"{name}/drop", self.conv(f"{name}/conv", h))


def dense_block(runner, idx, x, m):
    """Run dense block ``idx`` with ``m`` modules.

    Returns ``(full, new)``: the input concatenated with every module's output,
    and the concatenation of module outputs only.
    """
    feats = []
    current = x
    for j in range(m):
        out = runner.module(f"db{idx}/m{j}", current)
        feats.append(out)
        current = T.concat_channels([current, out])
    return current, T.concat_channels(feats)


def forward(params, spec, image, mode=DETERMINISTIC, trace=None, logits=False):
    """Softmax map ``(..., H, W, N_b)`` for ``image`` of shape ``(H, W, C)`` or ``(N, H, W, C)``.

    ``trace``, if a list, receives ``(stage_name, shape)`` for every stage.
    """
    x = image if isinstance(image, T.Tensor) else T.Tensor(image)
    batched = x.data.ndim == 4
    if not batched:
        if x.data.ndim != 3:
            raise T.DimensionError(f"forward needs (H, W, C) or (N, H, W, C) input, got shape {x.shape}")
        x = T.Tensor(x.data[None], dtype=x.dtype)
    if mode.kind == "mc" and len(mode.samples) != x.shape[0]:
        raise T.DimensionError(f"mc mode has {len(mode.samples)} sample ids for batch axis of size {x.shape[0]}")
    h, w, c = x.shape[1:]
    p = spec.n_pools
    div = 2 ** p
    if h % div:
        raise T.DimensionError(f"height axis {h} is not divisible by 2^{p}={div}")
    if w % div:
        raise T.DimensionError(f"width axis {w} is not divisible by 2^{p}={div}")
    if c != spec.input_channels:
        raise T.DimensionError(f"channel axis has {c}, spec expects {spec.input_channels}")

    run = _Runner(params, spec, mode, trace)
    counts = spec.db_layer_counts
    out = run.conv("stem", x)
    run.record("stem", out)
    skips = []
    for i in range(p):
        out, _ = dense_block(run, i, out, counts[i])
        run.record(f"db{i}", out)
        skips.append(out)
        td = run.drop(f"td{i}/drop", run.conv(f"td{i}/conv", T.relu(run.bn(f"td{i}/bn", out))))
        out = T.max_pool2d(td)
        run.record(f"td{i}", out)
    run.record(f"db{p}/in", out)
    full, new = dense_block(run, p, out, counts[p])
    run.record(f"db{p}/new", new)
    if p == 0:
        new = full
    for i in range(p):
        up = T.transposed_conv2d(new, run.t[f"tu{i}/W"], run.t[f"tu{i}/b"])
        run.record(f"tu{i}", up)
        stacked = T.concat_channels([up, skips[p - 1 - i]])
        idx = p + 1 + i
        run.record(f"db{idx}/in", stacked)
        full, new = dense_block(run, idx, stacked, counts[idx])
        run.record(f"db{idx}/new", new)
        if i == p - 1:
            new = full
    run.record("pre_classifier", new)
    scores = run.conv("classifier", new)
    out = scores if logits else T.softmax_channels(scores)
    run.record("softmax", out)
    if not batched:
        out = T.Tensor(out.data[0], dtype=out.dtype) if not out.requires_grad else _unbatch(out)
    return out


def _unbatch(x):
    return T._node(x.data[0], (x,), lambda g: (g[None],), "unbatch")


def pad_to_multiple(image, multiple):
    """Edge-pad ``(..., H, W, C)`` at the bottom/right to multiples of ``multiple``."""
    h, w = image.shape[-3], image.shape[-2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return image
    pad = [(0, 0)] * (image.ndim - 3) + [(0, ph), (0, pw), (0, 0)]
    return np.pad(image, pad, mode="edge")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, spec, path, meta=None):
    """``BSEGPAR1`` | u32 header length | header text | BTSR record per array."""
    header = spec.to_text()
    for key, value in (meta or {}).items():
        header += f"meta.{key} = {value}\n"
    blob = header.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for _, arr in params.state_arrays():
            fh.write(encode_btsr(arr))


def load_checkpoint(path):
    """Returns ``(params, spec, meta)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: checkpoint magic: expected {CHECKPOINT_MAGIC!r}, found {buf[:8]!r}")
    n = int.from_bytes(buf[8:12], "little")
    if len(buf) < 12 + n:
        raise FormatError(f"{path}: checkpoint header length: expected {n} bytes, found {len(buf) - 12}")
    text = buf[12:12 + n].decode("utf-8")
    spec = NetworkSpec.from_text(text)
    meta = {}
    for line in text.splitlines():
        if line.startswith("meta.") and "=" in line:
            key, value = line[5:].split("=", 1)
            meta[key.strip()] = value.strip()
    offset = 12 + n
    arrays = []
    while offset < len(buf):
        arr, offset = decode_btsr(buf, offset)
        arrays.append(arr)
    with T.precision(64 if arrays and arrays[0].dtype == np.float64 else 32):
        params = build(spec, 0)
    names = params.state_arrays()
    if len(arrays) != len(names):
        raise FormatError(f"{path}: checkpoint holds {len(arrays)} arrays, spec needs {len(names)}")
    for (name, target), arr in zip(names, arrays):
        if target.shape != arr.shape:
            raise FormatError(f"{path}: array {name} has shape {arr.shape}, spec needs {target.shape}")
        target[...] = arr
    return params, spec, meta
