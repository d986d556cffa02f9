""" model.py
    Segmentation network and discriminators on the autodiff engine.

    extract_pixel_features   small encoder-decoder, same spatial size out as in
    construct_nodes          masked mean pool + linear -> one descriptor per instance
    edge_conv                KNN graph over descriptors, relu(W [P_i, P_j - P_i] + b), max over neighbors
    expand_and_concat        scatter enhanced descriptors back over their masks, concat with pixel features
    segment                  1x1 projection to C classes, softmax over channels
    discriminate             masked mean of F, MLP 2d -> hidden -> 1, sigmoid
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from typeguard import typechecked

from udma import autodiff as ad
from udma import taxonomy
from udma.errors import EmptyNodeError, FormatError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = int.from_bytes(b'UDMC', 'little')
CHECKPOINT_VERSION = 1
DISCRIMINATOR_NAMES = ('main', 'car', 'ground', 'wall')


@dataclass
class ModelConfig:
    feature_dim: int = 16
    base_channels: int = 8
    knn_k: int = 4
    disc_hidden: int = 256
    use_ire: bool = True

    @classmethod
    def from_run_config(cls, cfg):
        return cls(cfg['feature_dim'], cfg['base_channels'], cfg['knn_k'], cfg['disc_hidden'], cfg['use_ire'])


def he_normal(rng, shape, fan_in) -> ad.Tensor:
    return ad.parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


class Conv3x3:
    def __init__(self, rng, in_channels, out_channels):
        self.weight = he_normal(rng, (out_channels, in_channels, 3, 3), in_channels * 9)
        self.bias = ad.parameter(np.zeros(out_channels))

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias)

    def parameters(self):
        return {'weight': self.weight, 'bias': self.bias}


class Linear:
    """ rows in, rows out: (n, in) -> (n, out) """

    def __init__(self, rng, in_features, out_features):
        self.weight = he_normal(rng, (in_features, out_features), in_features)
        self.bias = ad.parameter(np.zeros(out_features))

    def __call__(self, x):
        return ad.matmul(x, self.weight) + self.bias

    def parameters(self):
        return {'weight': self.weight, 'bias': self.bias}


class FeatureExtractor:
    """ two conv+pool stages, a bottleneck, two upsample+conv stages with skips """

    def __init__(self, rng, in_channels=3, base_channels=8, out_channels=16):
        b = base_channels
        self.enc1 = Conv3x3(rng, in_channels, b)
        self.enc2 = Conv3x3(rng, b, 2 * b)
        self.bottleneck = Conv3x3(rng, 2 * b, 2 * b)
        self.dec2 = Conv3x3(rng, 4 * b, 2 * b)
        self.dec1 = Conv3x3(rng, 3 * b, out_channels)
        self.out_channels = out_channels

    def __call__(self, x):
        return extract_pixel_features(self, x)

    def parameters(self):
        named = {}
        for stage in ('enc1', 'enc2', 'bottleneck', 'dec2', 'dec1'):
            for name, tensor in getattr(self, stage).parameters().items():
                named[f"{stage}.{name}"] = tensor
        return named


def extract_pixel_features(extractor: FeatureExtractor, x) -> ad.Tensor:
    x = ad.as_tensor(x)
    if x.data.ndim != 3 or x.shape[1] % 4 or x.shape[2] % 4:
        msg = f"feature extractor input {x.shape} must be (3, H, W) with H and W divisible by 4"
        raise ShapeError(msg)
    skip1 = ad.relu(extractor.enc1(x))
    skip2 = ad.relu(extractor.enc2(ad.max_pool2d(skip1)))
    bottom = ad.relu(extractor.bottleneck(ad.max_pool2d(skip2)))
    up2 = ad.relu(extractor.dec2(ad.concat([ad.nearest_upsample(bottom), skip2], axis=0)))
    return extractor.dec1(ad.concat([ad.nearest_upsample(up2), skip1], axis=0))


@dataclass
class NodeSet:
    masks: np.ndarray                       # (n, H, W) bool
    descriptors: ad.Tensor | None = None    # (n, d)
    enhanced: ad.Tensor | None = None       # (n, d)
    edges: list = field(default_factory=list)

    @property
    def sizes(self) -> np.ndarray:
        return self.masks.reshape(len(self.masks), -1).sum(axis=1)

    def __len__(self):
        return len(self.masks)


def check_masks(masks, height, width):
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 3 or masks.shape[1:] != (height, width):
        msg = f"node masks {masks.shape} do not match feature map {(height, width)}"
        raise ShapeError(msg)
    sizes = masks.reshape(len(masks), -1).sum(axis=1)
    if np.any(sizes == 0):
        msg = f"node mask {int(np.flatnonzero(sizes == 0)[0])} is empty"
        raise EmptyNodeError(msg)
    if len(masks) > 0 and masks.sum(axis=0).max() > 1:
        msg = "node masks overlap"
        raise ShapeError(msg)
    return masks, sizes


def construct_nodes(f_pixel: ad.Tensor, masks, linear: Linear) -> ad.Tensor:
    """ (n, d) descriptors: Linear(mean of f_pixel over each mask) """
    channels, height, width = f_pixel.shape
    masks, sizes = check_masks(masks, height, width)
    pool = masks.reshape(len(masks), -1) / sizes[:, None]                  # (n, HW)
    flat = ad.reshape(f_pixel, (channels, height * width))
    pooled = ad.transpose(ad.matmul(flat, ad.Tensor(pool.T)))              # (n, d)
    return linear(pooled)


def knn_edges(points, k) -> np.ndarray:
    """ (n, k') neighbor indices, self excluded, ties to the lower index; k' = min(k, n - 1) """
    n = len(points)
    k_eff = min(k, n - 1)
    if k_eff <= 0:
        return np.zeros((n, 0), dtype=np.int64)
    diff = points[:, None, :] - points[None, :, :]
    distance = np.sqrt((diff ** 2).sum(axis=-1))
    np.fill_diagonal(distance, np.inf)
    return np.argsort(distance, axis=1, kind='stable')[:, :k_eff]


def edge_conv(descriptors: ad.Tensor, k: int, linear: Linear) -> tuple[ad.Tensor, list]:
    """ (n, d) -> (n, d) enhanced descriptors and the (i, j) edge list.
        A lone node gets a self edge with a zero difference vector.
    """
    n = descriptors.shape[0]
    if n == 0:
        return descriptors, []
    neighbors = knn_edges(descriptors.data, k)
    if neighbors.shape[1] == 0:
        neighbors = np.arange(n)[:, None]
    k_eff = neighbors.shape[1]
    source = np.repeat(np.arange(n), k_eff)
    target = neighbors.reshape(-1)
    select_source = np.zeros((n * k_eff, n))
    select_source[np.arange(n * k_eff), source] = 1.0
    select_target = np.zeros((n * k_eff, n))
    select_target[np.arange(n * k_eff), target] = 1.0

    p_i = ad.matmul(ad.Tensor(select_source), descriptors)
    p_j = ad.matmul(ad.Tensor(select_target), descriptors)
    edge_features = ad.relu(linear(ad.concat([p_i, p_j - p_i], axis=1)))   # (n k', d)
    stacked = ad.reshape(edge_features, (n, k_eff, edge_features.shape[1]))
    edges = [(int(i), int(j)) for i, j in zip(source, target)]
    return ad.max_reduce(stacked, 1), edges


def expand_and_concat(f_pixel: ad.Tensor, nodes: NodeSet | None) -> ad.Tensor:
    """ (2d, H, W): f_pixel on top, each node's enhanced descriptor over its mask below """
    channels, height, width = f_pixel.shape
    if nodes is None or len(nodes) == 0 or nodes.enhanced is None:
        return ad.concat([f_pixel, ad.Tensor(np.zeros((channels, height, width)))], axis=0)
    scatter = nodes.masks.reshape(len(nodes), -1).astype(np.float64)       # (n, HW)
    node_channels = nodes.enhanced.shape[1]
    f_node = ad.matmul(ad.transpose(nodes.enhanced), ad.Tensor(scatter))     # (d, HW)
    f_node = ad.reshape(f_node, (node_channels, height, width))
    return ad.concat([f_pixel, f_node], axis=0)


def segment(features: ad.Tensor, weight: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    """ (2d, H, W) -> (C, H, W) class probabilities """
    channels, height, width = features.shape
    flat = ad.reshape(features, (channels, height * width))
    logits = ad.matmul(weight, flat) + ad.reshape(bias, (-1, 1))             # (C, HW)
    probabilities = ad.softmax(ad.transpose(logits))                        # (HW, C)
    return ad.reshape(ad.transpose(probabilities), (weight.shape[0], height, width))


class Discriminator:
    """ MLP in -> hidden -> 1, relu then sigmoid; output is P(source) """

    def __init__(self, rng, in_features, hidden=256):
        self.hidden = Linear(rng, in_features, hidden)
        self.output = Linear(rng, hidden, 1)

    def __call__(self, feature):
        row = ad.reshape(feature, (1, -1))
        score = self.output(ad.relu(self.hidden(row)))
        return ad.reshape(ad.sigmoid(score), ())

    def parameters(self):
        return {'hidden.weight': self.hidden.weight, 'hidden.bias': self.hidden.bias,
                'output.weight': self.output.weight, 'output.bias': self.output.bias}


def discriminate(features: ad.Tensor, pixel_mask, discriminator: Discriminator) -> ad.Tensor | None:
    """ D(mean of features over pixel_mask); None when the mask is empty """
    pixel_mask = np.asarray(pixel_mask, dtype=bool)
    if not pixel_mask.any():
        return None
    pooled = ad.mean_pool(ad.gather_mask(features, pixel_mask), 1)
    return discriminator(pooled)


@dataclass
class ForwardResult:
    f_pixel: ad.Tensor
    nodes: NodeSet
    features: ad.Tensor
    probabilities: ad.Tensor


class UDMAModel:

    def __init__(self, cfg: ModelConfig = None, seed=0):
        cfg = cfg if cfg is not None else ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.feature_dim
        self.extractor = FeatureExtractor(rng, 3, cfg.base_channels, d)
        self.node_linear = Linear(rng, d, d)
        self.edge_linear = Linear(rng, 2 * d, d)
        self.seg_weight = he_normal(rng, (taxonomy.NUM_CLASSES, 2 * d), 2 * d)
        self.seg_bias = ad.parameter(np.zeros(taxonomy.NUM_CLASSES))
        self.discriminators = {name: Discriminator(rng, 2 * d, cfg.disc_hidden) for name in DISCRIMINATOR_NAMES}

    def generator_parameters(self) -> dict[str, ad.Tensor]:
        named = {f"extractor.{k}": v for k, v in self.extractor.parameters().items()}
        named.update({f"node_linear.{k}": v for k, v in self.node_linear.parameters().items()})
        named.update({f"edge_linear.{k}": v for k, v in self.edge_linear.parameters().items()})
        named['seg.weight'] = self.seg_weight
        named['seg.bias'] = self.seg_bias
        return named

    def discriminator_parameters(self) -> dict[str, ad.Tensor]:
        named = {}
        for disc_name, disc in self.discriminators.items():
            named.update({f"disc.{disc_name}.{k}": v for k, v in disc.parameters().items()})
        return named

    def named_parameters(self) -> dict[str, ad.Tensor]:
        named = self.generator_parameters()
        named.update(self.discriminator_parameters())
        return named

    def zero_grad(self):
        for tensor in self.named_parameters().values():
            tensor.zero_grad()

    def build_nodes(self, f_pixel, masks) -> NodeSet:
        masks = np.asarray(masks, dtype=bool).reshape(-1, *f_pixel.shape[1:])
        nodes = NodeSet(masks)
        if not self.cfg.use_ire or len(masks) == 0:
            return nodes
        nodes.descriptors = construct_nodes(f_pixel, masks, self.node_linear)
        nodes.enhanced, nodes.edges = edge_conv(nodes.descriptors, self.cfg.knn_k, self.edge_linear)
        return nodes

    def forward(self, network_input, node_masks) -> ForwardResult:
        f_pixel = extract_pixel_features(self.extractor, network_input)
        nodes = self.build_nodes(f_pixel, node_masks)
        features = expand_and_concat(f_pixel, nodes)
        probabilities = segment(features, self.seg_weight, self.seg_bias)
        return ForwardResult(f_pixel, nodes, features, probabilities)

    def predict(self, network_input, node_masks) -> np.ndarray:
        """ per-pixel argmax class """
        return np.argmax(self.forward(network_input, node_masks).probabilities.data, axis=0)


def source_node_masks(labels) -> np.ndarray:
    """ 8-connected regions of each class in a label map, class by class """
    labels = np.asarray(labels)
    masks = []
    structure = np.ones((3, 3), dtype=bool)
    for class_id in range(taxonomy.NUM_CLASSES):
        regions, count = ndimage.label(labels == class_id, structure=structure)
        for region in range(1, count + 1):
            masks.append(regions == region)
    if not masks:
        return np.zeros((0,) + labels.shape, dtype=bool)
    return np.stack(masks)


def target_node_masks(component_image, valid) -> np.ndarray:
    """ one mask per pre-segmentation component visible in the range image """
    component_image = np.asarray(component_image)
    visible = np.unique(component_image[np.asarray(valid) & (component_image >= 0)])
    if len(visible) == 0:
        return np.zeros((0,) + component_image.shape, dtype=bool)
    return np.stack([component_image == k for k in visible])


@typechecked
def save_checkpoint(path: str, model: UDMAModel):
    """ header: magic, version, d, base, k, hidden, use_ire, tensor count (int64);
        then per tensor: name length, name bytes, ndim, dims, float64 data
    """
    cfg = model.cfg
    named = model.named_parameters()
    header = [CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.feature_dim, cfg.base_channels,
              cfg.knn_k, cfg.disc_hidden, int(cfg.use_ire), len(named)]
    with open(path, 'wb') as checkpoint:
        checkpoint.write(np.array(header, dtype='<i8').tobytes())
        for name, tensor in named.items():
            encoded = name.encode('utf-8')
            checkpoint.write(np.array([len(encoded)], dtype='<i8').tobytes())
            checkpoint.write(encoded)
            checkpoint.write(np.array([tensor.data.ndim, *tensor.shape], dtype='<i8').tobytes())
            checkpoint.write(tensor.data.astype('<f8').tobytes())


@typechecked
def load_checkpoint(path: str) -> UDMAModel:
    with open(path, 'rb') as checkpoint:
        payload = checkpoint.read()
    offset = 0

    def take_ints(count):
        nonlocal offset
        if offset + 8 * count > len(payload):
            msg = f"checkpoint {path} truncated at byte {offset}"
            raise FormatError(msg)
        values = np.frombuffer(payload[offset:offset + 8 * count], dtype='<i8')
        offset += 8 * count
        return [int(v) for v in values]

    magic, version, d, base, k, hidden, use_ire, count = take_ints(8)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        msg = f"checkpoint {path} has magic {magic:#x} version {version}, expected version {CHECKPOINT_VERSION}"
        raise FormatError(msg)
    model = UDMAModel(ModelConfig(d, base, k, hidden, bool(use_ire)))
    named = model.named_parameters()
    for _ in range(count):
        (name_length,) = take_ints(1)
        name = payload[offset:offset + name_length].decode('utf-8')
        offset += name_length
        (ndim,) = take_ints(1)
        shape = tuple(take_ints(ndim))
        size = int(np.prod(shape)) if shape else 1
        if offset + 8 * size > len(payload):
            msg = f"checkpoint {path} truncated inside tensor {name}"
            raise FormatError(msg)
        if name not in named or named[name].shape != shape:
            msg = f"checkpoint {path} tensor {name} {shape} does not fit the model"
            raise FormatError(msg)
        named[name].data[...] = np.frombuffer(payload[offset:offset + 8 * size], dtype='<f8').reshape(shape)
        offset += 8 * size
    if offset != len(payload):
        msg = f"checkpoint {path} has {len(payload) - offset} trailing bytes"
        raise FormatError(msg)
    return model
