"""Architecture builders.

Node ids follow a fixed scheme so plans and taps can name them:
``stem.*`` for the stem, ``s{stage}.b{block}.*`` inside blocks and
``head.*``/``fc`` for the classifier.  Every block node carries a
:class:`BlockTag`; stem and head nodes are untagged (stage 0).

Weights come from :func:`init_weights`, a fan-in scaled uniform draw seeded
per node, so any builder is reproducible from ``(name, variant, seed)``.
"""

from __future__ import annotations

import zlib

import numpy as np

from .ir import INPUT, BlockTag, BNSpec, ConvSpec, FCSpec, ModelGraph, PadSpec, PoolSpec, validate_graph

ARCHITECTURES = {
    "resnet34": ("imagenet",),
    "resnet50": ("imagenet",),
    "resnet56": ("cifar",),
    "vgg16": ("imagenet", "cifar"),
    "mobilenetv2": ("imagenet",),
    "resnet14": ("cifar",),  # small residual net used for desk-scale experiments
}

RESOLUTION = {"imagenet": (3, 224, 224), "cifar": (3, 32, 32)}
NUM_CLASSES = {"imagenet": 1000, "cifar": 10}


class ArchitectureError(ValueError):
    pass


class _Builder:
    def __init__(self, name, variant, dtype=np.float32):
        self.g = ModelGraph(input_spec=RESOLUTION[variant], name=f"{name}-{variant}")
        self.dtype = dtype
        self.tag = None
        self.last = INPUT

    def conv(self, nid, src, cin, cout, k, stride=1, pad=None, groups=1, bias=False):
        pad = k // 2 if pad is None else pad
        spec = ConvSpec(
            np.zeros((cout, cin // groups, k, k), self.dtype),
            np.zeros(cout, self.dtype) if bias else None,
            (stride, stride),
            (pad, pad),
            groups,
        )
        return self._add(nid, "Conv", src, spec)

    def bn(self, nid, src, c):
        return self._add(nid, "BN", src, BNSpec.fresh(c, self.dtype))

    def act(self, nid, src, kind="ReLU"):
        return self._add(nid, kind, src)

    def pool(self, nid, src, k, s, p=0):
        return self._add(nid, "MaxPool", src, PoolSpec(k, s, p))

    def fc(self, nid, src, cin, cout):
        return self._add(nid, "FC", src, FCSpec(np.zeros((cout, cin), self.dtype), np.zeros(cout, self.dtype)))

    def _add(self, nid, kind, src, params=None):
        self.last = self.g.add(nid, kind, src, params, tag=self.tag)
        return self.last

    def conv_bn(self, prefix, src, cin, cout, k, stride=1, act="ReLU", groups=1, bias=False, suffix=""):
        x = self.conv(f"{prefix}.conv{suffix}", src, cin, cout, k, stride, groups=groups, bias=bias)
        x = self.bn(f"{prefix}.bn{suffix}", x, cout)
        if act:
            x = self.act(f"{prefix}.relu{suffix}", x, act)
        return x

    def head(self, src, cin, classes):
        self.tag = None
        x = self._add("head.pool", "GlobalAvgPool", src)
        x = self._add("head.flatten", "Flatten", x)
        return self.fc("fc", x, cin, classes)


def init_weights(graph, seed=0):
    """Deterministic fan-in scaled uniform init, independent of node order.

    Conv weights: U(±sqrt(6 / fan_in)) (He-uniform).  FC weights and all
    biases: U(±1/sqrt(fan_in)).  BN: gamma=1, beta=0, mean=0, var=1.  Each
    node draws from its own stream seeded by ``(seed, crc32(node id))``.
    """
    for nid, node in graph.nodes.items():
        p = node.params
        if node.kind not in ("Conv", "FC"):
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(nid.encode())]))
        w = p.weight
        fan_in = int(np.prod(w.shape[1:]))
        bound = np.sqrt(6.0 / fan_in) if node.kind == "Conv" else 1.0 / np.sqrt(fan_in)
        p.weight = rng.uniform(-bound, bound, size=w.shape).astype(w.dtype)
        if p.bias is not None:
            b = 1.0 / np.sqrt(fan_in)
            p.bias = rng.uniform(-b, b, size=p.bias.shape).astype(p.bias.dtype)
    return graph


# --------------------------------------------------------------------------
# residual nets
# --------------------------------------------------------------------------


def _basic_block(b, prefix, src, cin, cout, stride, shortcut):
    x = b.conv_bn(prefix, src, cin, cout, 3, stride, suffix="1")
    x = b.conv_bn(prefix, x, cout, cout, 3, 1, act=None, suffix="2")
    return _join(b, prefix, src, x, cin, cout, stride, shortcut)


def _bottleneck(b, prefix, src, cin, width, stride, shortcut):
    cout = width * 4
    x = b.conv_bn(prefix, src, cin, width, 1, 1, suffix="1")
    x = b.conv_bn(prefix, x, width, width, 3, stride, suffix="2")
    x = b.conv_bn(prefix, x, width, cout, 1, 1, act=None, suffix="3")
    return _join(b, prefix, src, x, cin, cout, stride, shortcut), cout


def _join(b, prefix, src, x, cin, cout, stride, shortcut):
    short = src
    if stride != 1 or cin != cout:
        if shortcut == "A":
            pad = (cout - cin) // 2
            short = b._add(f"{prefix}.pad", "ChannelPad", src, PadSpec(stride, pad, cout - cin - pad))
        else:
            short = b.conv(f"{prefix}.down.conv", src, cin, cout, 1, stride, pad=0)
            short = b.bn(f"{prefix}.down.bn", short, cout)
    y = b._add(f"{prefix}.add", "Add", (x, short))
    return b.act(f"{prefix}.relu", y)


def _resnet_imagenet(name, depths, bottleneck):
    b = _Builder(name, "imagenet")
    x = b.conv_bn("stem", INPUT, 3, 64, 7, 2)
    x = b.pool("stem.pool", x, 3, 2, 1)
    cin = 64
    for si, (n, width) in enumerate(zip(depths, (64, 128, 256, 512)), start=1):
        for bi in range(1, n + 1):
            stride = 2 if (bi == 1 and si > 1) else 1
            b.tag = BlockTag(si, bi, "first" if bi == 1 else "inner")
            prefix = f"s{si}.b{bi}"
            if bottleneck:
                x, cin = _bottleneck(b, prefix, x, cin, width, stride, "B")
            else:
                x = _basic_block(b, prefix, x, cin, width, stride, "B")
                cin = width
    b.head(x, cin, 1000)
    return b.g


def _resnet_cifar(name, depths, widths, shortcut, classes=10):
    b = _Builder(name, "cifar")
    x = b.conv_bn("stem", INPUT, 3, widths[0], 3, 1)
    cin = widths[0]
    for si, (n, width) in enumerate(zip(depths, widths), start=1):
        for bi in range(1, n + 1):
            stride = 2 if (bi == 1 and si > 1) else 1
            b.tag = BlockTag(si, bi, "first" if bi == 1 else "inner")
            x = _basic_block(b, f"s{si}.b{bi}", x, cin, width, stride, shortcut)
            cin = width
    b.head(x, cin, classes)
    return b.g


# --------------------------------------------------------------------------
# VGG-16
# --------------------------------------------------------------------------

_VGG_STAGES = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))


def _vgg16(variant):
    b = _Builder("vgg16", variant)
    x, cin = INPUT, 3
    for si, widths in enumerate(_VGG_STAGES, start=1):
        for bi, cout in enumerate(widths, start=1):
            b.tag = BlockTag(si, bi, "first" if bi == 1 else "inner")
            if bi == 1 and si > 1:
                x = b.pool(f"s{si}.b1.pool", x, 2, 2)
            x = b.conv_bn(f"s{si}.b{bi}", x, cin, cout, 3, 1, bias=True)
            cin = cout
    b.tag = None
    if variant == "imagenet":
        x = b.pool("head.pool5", x, 2, 2)
        x = b._add("head.flatten", "Flatten", x)
        x = b.act("head.relu6", b.fc("head.fc6", x, 512 * 7 * 7, 4096))
        x = b.act("head.relu7", b.fc("head.fc7", x, 4096, 4096))
        b.fc("fc", x, 4096, 1000)
    else:
        x = b._add("head.pool", "GlobalAvgPool", x)
        x = b._add("head.flatten", "Flatten", x)
        x = b.fc("head.fc1", x, 512, 512)
        x = b.bn("head.bn1", x, 512)
        x = b.act("head.relu1", x)
        b.fc("fc", x, 512, 10)
    return b.g


# --------------------------------------------------------------------------
# MobileNetV2
# --------------------------------------------------------------------------

# (expansion t, channels c, repeats n, first stride s); one stage per row
_MBV2 = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))


def _mobilenetv2():
    b = _Builder("mobilenetv2", "imagenet")
    x = b.conv_bn("stem", INPUT, 3, 32, 3, 2, act="ReLU6")
    cin = 32
    for si, (t, c, n, s) in enumerate(_MBV2, start=1):
        for bi in range(1, n + 1):
            stride = s if bi == 1 else 1
            b.tag = BlockTag(si, bi, "first" if bi == 1 else "inner")
            prefix = f"s{si}.b{bi}"
            hidden = cin * t
            src = x
            if t != 1:
                x = b.conv_bn(prefix, x, cin, hidden, 1, 1, act="ReLU6", suffix="1")
            x = b.conv_bn(prefix, x, hidden, hidden, 3, stride, act="ReLU6", groups=hidden, suffix="2")
            x = b.conv_bn(prefix, x, hidden, c, 1, 1, act=None, suffix="3")
            if stride == 1 and cin == c:
                x = b._add(f"{prefix}.add", "Add", (x, src))
            cin = c
    b.tag = None
    x = b.conv_bn("head", x, cin, 1280, 1, 1, act="ReLU6")
    b.head(x, 1280, 1000)
    return b.g


def build_architecture(name, variant, seed=0, widths=None, num_classes=None, depths=None):
    """Build a validated, tagged, deterministically initialised graph.

    ``widths``, ``depths`` and ``num_classes`` only apply to the ``resnet14``
    toy net (three stages, option-B shortcuts).
    """
    if name not in ARCHITECTURES:
        raise ArchitectureError(f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}")
    if variant not in ARCHITECTURES[name]:
        raise ArchitectureError(f"{name} is not defined for variant {variant!r}")
    if name == "resnet34":
        g = _resnet_imagenet(name, (3, 4, 6, 3), False)
    elif name == "resnet50":
        g = _resnet_imagenet(name, (3, 4, 6, 3), True)
    elif name == "resnet56":
        g = _resnet_cifar(name, (9, 9, 9), (16, 32, 64), "A")
    elif name == "resnet14":
        g = _resnet_cifar(name, tuple(depths or (2, 2, 2)), tuple(widths or (16, 32, 64)), "B", num_classes or 10)
    elif name == "vgg16":
        g = _vgg16(variant)
    else:
        g = _mobilenetv2()
    init_weights(g, seed)
    problems = validate_graph(g)
    if problems:  # pragma: no cover - builders are tested
        raise ArchitectureError("; ".join(map(str, problems)))
    return g


# Table-defined block-drop variants
PLANS = {
    "resnet34": {"A": ["1.2"], "B": ["1.2", "2.2"], "C": ["1.2", "2.2", "3.2"]},
    "resnet50": {"A": ["1.2"], "B": ["1.2", "2.2"], "C": ["1.2", "2.2", "3.2"]},
    "vgg16": {"A": ["1.2"], "B": ["1.2", "2.2"], "C": ["1.2", "2.2", "3.2"]},
    "mobilenetv2": {
        "A": ["3.2"],
        "B": ["3.2", "4.2"],
        "C": ["3.2", "4.2", "5.2"],
        "D": ["3.2", "4.2", "5.2", "6.2"],
    },
}
