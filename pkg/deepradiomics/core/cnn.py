import base64
import json
import logging
import struct
import zlib
from collections.abc import Iterable
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any, Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from deepradiomics.core.volume import RoiMask, Volume, resample_grid
from deepradiomics.utils.errors import LayerError, WeightFormatError

logger = logging.getLogger(__name__)

MAGIC = b"DRF1"
JSON_FORMAT_TAG = "DRF1-json"
DRF_CHANNELS = 20


class LayerKind(StrEnum):
	"""Layer types understood by the inference engine."""

	CONV3D = "conv3d"
	RELU = "relu"
	MAXPOOL = "maxpool"


_KIND_CODES: dict[LayerKind, int] = {LayerKind.CONV3D: 0, LayerKind.RELU: 1, LayerKind.MAXPOOL: 2}
_CODE_KINDS: dict[int, LayerKind] = {code: kind for kind, code in _KIND_CODES.items()}


@dataclass(frozen=True, eq=False)
class Layer:
	"""One network layer.

	For ``conv3d`` the weights have shape ``(out_channels, in_channels, kx, ky, kz)``
	and are applied as a cross-correlation. For ``maxpool`` the window is
	``kernel`` and the step ``stride``. ``relu`` carries no parameters.
	"""

	kind: LayerKind
	kernel: tuple[int, int, int] = (1, 1, 1)
	in_channels: int = 0
	out_channels: int = 0
	stride: int = 1
	padding: int = 0
	weights: np.ndarray | None = None
	biases: np.ndarray | None = None

	def __post_init__(self):
		object.__setattr__(self, "kind", LayerKind(self.kind))
		object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
		if len(self.kernel) != 3 or min(self.kernel) < 1 or self.stride < 1 or self.padding < 0:
			raise WeightFormatError(
				f"{self.kind} layer has invalid geometry: kernel={self.kernel}, "
				f"stride={self.stride}, padding={self.padding}"
			)
		if self.kind is not LayerKind.CONV3D:
			return

		shape = (self.out_channels, self.in_channels, *self.kernel)
		weights = np.asarray(self.weights, dtype=np.float32)
		biases = np.asarray(self.biases, dtype=np.float32)
		if weights.size != int(np.prod(shape)):
			raise WeightFormatError(
				f"conv3d weights hold {weights.size} values "
				f"but shape {shape} needs {np.prod(shape)}"
			)
		if biases.size != self.out_channels:
			raise WeightFormatError(
				f"conv3d biases hold {biases.size} values but out_channels={self.out_channels}"
			)
		weights = weights.reshape(shape).copy()
		biases = biases.reshape(self.out_channels).copy()
		weights.flags.writeable = False
		biases.flags.writeable = False
		object.__setattr__(self, "weights", weights)
		object.__setattr__(self, "biases", biases)


@dataclass(frozen=True, eq=False)
class NetworkWeights:
	"""An immutable, ready-to-run layer stack.

	Activation layers are numbered from 1 in the order their ReLU outputs
	appear; these are the layers ``forward_activations`` can return.

	Attributes:
		layers: ordered layers.
		input_side: expected cube side of the input, 0 for any size.
	"""

	layers: tuple[Layer, ...]
	input_side: int = 0
	activation_indices: tuple[int, ...] = field(init=False)

	def __post_init__(self):
		object.__setattr__(self, "layers", tuple(self.layers))
		object.__setattr__(
			self,
			"activation_indices",
			tuple(i for i, layer in enumerate(self.layers) if layer.kind is LayerKind.RELU),
		)

	@property
	def n_activation_layers(self) -> int:
		return len(self.activation_indices)

	def check_drf_architecture(self) -> None:
		"""Require the first two conv layers to emit 20 maps each and one input channel.

		Raises:
			WeightFormatError: the stack cannot feed the 20-map encoding.
		"""
		convs = [layer for layer in self.layers if layer.kind is LayerKind.CONV3D]
		if len(convs) < 2 or any(c.out_channels != DRF_CHANNELS for c in convs[:2]):
			raise WeightFormatError(
				f"Expected the first two conv3d layers to have {DRF_CHANNELS} output channels"
			)
		if convs[0].in_channels != 1:
			raise WeightFormatError("First conv3d layer must take a single input channel")
		if self.n_activation_layers < 2:
			raise WeightFormatError("Network must expose two ReLU activation layers")


@dataclass(frozen=True, eq=False)
class ActivationStack:
	"""Feature maps of one activation layer plus the ROI mask at that resolution.

	Attributes:
		layer_id: 1-based activation layer number.
		maps: array of shape ``(channels, x, y, z)``.
		mask: boolean grid of shape ``(x, y, z)``.
	"""

	layer_id: int
	maps: np.ndarray
	mask: np.ndarray

	@property
	def n_maps(self) -> int:
		return self.maps.shape[0]


# --- weight files --------------------------------------------------------------
def init_weights(
	seed: int = 42, input_side: int = 64, channels: int = DRF_CHANNELS
) -> NetworkWeights:
	"""Build the reference architecture with seeded He-normal weights and zero biases.

	conv3d(3^3, 1->C, pad 1) -> ReLU [layer 1] -> maxpool(2^3) ->
	conv3d(3^3, C->C, pad 1) -> ReLU [layer 2]. Same seed, same bits.
	"""
	rng = np.random.default_rng(seed)

	def conv(in_ch: int, out_ch: int) -> Layer:
		fan_in = in_ch * 27
		weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, 3, 3, 3))
		return Layer(
			LayerKind.CONV3D,
			kernel=(3, 3, 3),
			in_channels=in_ch,
			out_channels=out_ch,
			stride=1,
			padding=1,
			weights=weights.astype(np.float32),
			biases=np.zeros(out_ch, dtype=np.float32),
		)

	layers = (
		conv(1, channels),
		Layer(LayerKind.RELU),
		Layer(LayerKind.MAXPOOL, kernel=(2, 2, 2), stride=2),
		conv(channels, channels),
		Layer(LayerKind.RELU),
	)
	return NetworkWeights(layers, input_side=input_side)


def load_weights(path: str | Path) -> NetworkWeights:
	"""Load a network from a DRF1 binary file or its JSON manifest variant.

	The binary layout is ``"DRF1"``, ``<II`` (input side, layer count), one
	layer record per layer (``<B`` kind code, then ``<7I`` kernel x/y/z,
	in/out channels, stride, padding), the float32 little-endian weight and
	bias blobs of every conv layer in order, and a trailing ``<I`` CRC32 over
	all preceding bytes. The JSON variant stores the same fields with base64
	blobs and ``"format": "DRF1-json"``.

	Raises:
		FileNotFoundError: ``path`` does not exist.
		WeightFormatError: bad magic, checksum, truncation or shape mismatch.
	"""
	path = Path(path)
	if not path.is_file():
		raise FileNotFoundError(f"Weights file not found: {path}")

	payload = path.read_bytes()
	if payload[:4] == MAGIC:
		weights = _decode_binary(payload, path)
	else:
		weights = _decode_json(payload, path)

	logger.debug(
		"Loaded %d layers (%d activation layers) from %s",
		len(weights.layers),
		weights.n_activation_layers,
		path,
	)
	return weights


def save_weights(
	weights: NetworkWeights, path: str | Path, fmt: Literal["binary", "json"] = "binary"
) -> Path:
	"""Write ``weights`` in the DRF1 binary layout or the JSON manifest variant."""
	path = Path(path)
	match fmt:
		case "binary":
			path.write_bytes(_encode_binary(weights))
		case "json":
			with open(path, "w") as f:
				json.dump(_encode_json(weights), f, indent=1)
		case _:
			raise ValueError(f"Unknown weight format {fmt!r}")
	return path


def _layer_record(layer: Layer) -> tuple[int, ...]:
	return (
		*layer.kernel,
		layer.in_channels,
		layer.out_channels,
		layer.stride,
		layer.padding,
	)


def _encode_binary(weights: NetworkWeights) -> bytes:
	chunks = [MAGIC, struct.pack("<II", weights.input_side, len(weights.layers))]
	for layer in weights.layers:
		chunks.append(struct.pack("<B", _KIND_CODES[layer.kind]))
		chunks.append(struct.pack("<7I", *_layer_record(layer)))
	for layer in weights.layers:
		if layer.kind is LayerKind.CONV3D:
			chunks.append(np.asarray(layer.weights, dtype="<f4").tobytes())
			chunks.append(np.asarray(layer.biases, dtype="<f4").tobytes())
	body = b"".join(chunks)
	return body + struct.pack("<I", zlib.crc32(body))


def _decode_binary(payload: bytes, path: Path) -> NetworkWeights:
	if len(payload) < 16:
		raise WeightFormatError(f"{path}: file too short for a DRF1 header")

	body, (crc,) = payload[:-4], struct.unpack("<I", payload[-4:])
	if zlib.crc32(body) != crc:
		raise WeightFormatError(f"{path}: CRC32 mismatch, file is corrupt")

	input_side, n_layers = struct.unpack_from("<II", body, 4)
	offset = 12
	records: list[tuple[LayerKind, tuple[int, ...]]] = []
	try:
		for _ in range(n_layers):
			(code,) = struct.unpack_from("<B", body, offset)
			record = struct.unpack_from("<7I", body, offset + 1)
			offset += 1 + struct.calcsize("<7I")
			if code not in _CODE_KINDS:
				raise WeightFormatError(f"{path}: unknown layer kind code {code}")
			records.append((_CODE_KINDS[code], record))
	except struct.error as e:
		raise WeightFormatError(f"{path}: layer table truncated") from e

	layers: list[Layer] = []
	for kind, (kx, ky, kz, in_ch, out_ch, stride, padding) in records:
		if kind is not LayerKind.CONV3D:
			layers.append(Layer(kind, kernel=(kx, ky, kz), stride=stride, padding=padding))
			continue
		n_weights = out_ch * in_ch * kx * ky * kz
		end = offset + 4 * (n_weights + out_ch)
		if end > len(body):
			raise WeightFormatError(
				f"{path}: conv3d ({in_ch}->{out_ch}, {kx}x{ky}x{kz}) blob truncated"
			)
		blob = np.frombuffer(body, dtype="<f4", count=n_weights + out_ch, offset=offset)
		offset = end
		layers.append(
			Layer(
				kind,
				kernel=(kx, ky, kz),
				in_channels=in_ch,
				out_channels=out_ch,
				stride=stride,
				padding=padding,
				weights=blob[:n_weights],
				biases=blob[n_weights:],
			)
		)

	if offset != len(body):
		raise WeightFormatError(
			f"{path}: {len(body) - offset} trailing bytes after the declared weight blobs"
		)
	return NetworkWeights(tuple(layers), input_side=input_side)


def _encode_json(weights: NetworkWeights) -> dict[str, Any]:
	layers: list[dict[str, Any]] = []
	for layer in weights.layers:
		entry: dict[str, Any] = {"kind": layer.kind.value}
		if layer.kind is LayerKind.MAXPOOL:
			entry |= {"kernel": list(layer.kernel), "stride": layer.stride}
		elif layer.kind is LayerKind.CONV3D:
			entry |= {
				"kernel": list(layer.kernel),
				"in_channels": layer.in_channels,
				"out_channels": layer.out_channels,
				"stride": layer.stride,
				"padding": layer.padding,
				"weights": base64.b64encode(np.asarray(layer.weights, "<f4").tobytes()).decode(),
				"biases": base64.b64encode(np.asarray(layer.biases, "<f4").tobytes()).decode(),
			}
		layers.append(entry)
	return {"format": JSON_FORMAT_TAG, "input_side": weights.input_side, "layers": layers}


def _decode_json(payload: bytes, path: Path) -> NetworkWeights:
	try:
		manifest = json.loads(payload)
	except (UnicodeDecodeError, json.JSONDecodeError) as e:
		raise WeightFormatError(f"{path}: neither DRF1 binary nor a JSON weight manifest") from e

	if not isinstance(manifest, dict) or manifest.get("format") != JSON_FORMAT_TAG:
		raise WeightFormatError(f"{path}: JSON manifest must declare format {JSON_FORMAT_TAG!r}")

	layers: list[Layer] = []
	try:
		for entry in manifest["layers"]:
			kind = LayerKind(entry["kind"])
			kernel = tuple(entry.get("kernel", (1, 1, 1)))
			if kind is LayerKind.CONV3D:
				layers.append(
					Layer(
						kind,
						kernel=kernel,  # ty: ignore[invalid-argument-type]
						in_channels=int(entry["in_channels"]),
						out_channels=int(entry["out_channels"]),
						stride=int(entry.get("stride", 1)),
						padding=int(entry.get("padding", 0)),
						weights=np.frombuffer(base64.b64decode(entry["weights"]), dtype="<f4"),
						biases=np.frombuffer(base64.b64decode(entry["biases"]), dtype="<f4"),
					)
				)
			else:
				stride = int(entry.get("stride", 1))
				layers.append(
					Layer(kind, kernel=kernel, stride=stride)  # ty: ignore[invalid-argument-type]
				)
	except (KeyError, TypeError, ValueError) as e:
		if isinstance(e, WeightFormatError):
			raise
		raise WeightFormatError(f"{path}: malformed layer entry ({e})") from e

	return NetworkWeights(tuple(layers), input_side=int(manifest.get("input_side", 0)))


# --- inference -----------------------------------------------------------------
def conv3d(x: np.ndarray, layer: Layer) -> np.ndarray:
	"""Zero-padded 3D cross-correlation of ``x`` with shape ``(C_in, X, Y, Z)``."""
	p, s = layer.padding, layer.stride
	if x.shape[0] != layer.in_channels:
		raise ValueError(f"conv3d expects {layer.in_channels} input channels, got {x.shape[0]}")
	padded = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
	windows = sliding_window_view(padded, layer.kernel, axis=(1, 2, 3))[:, ::s, ::s, ::s]
	out = np.tensordot(layer.weights, windows, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
	biases = layer.biases[:, None, None, None]  # ty: ignore[not-subscriptable]
	return (out + biases).astype(np.float32)


def max_pool(x: np.ndarray, kernel: tuple[int, int, int], stride: int) -> np.ndarray:
	"""Window maximum over the trailing three axes (valid windows only)."""
	windows = sliding_window_view(x, kernel, axis=(-3, -2, -1))
	windows = windows[..., ::stride, ::stride, ::stride, :, :, :]
	return windows.max(axis=(-3, -2, -1))


def _downsample_mask(mask: np.ndarray, out_shape: tuple[int, ...], stride: int) -> np.ndarray:
	"""Any-voxel rule: an output voxel is foreground if any voxel of its block is."""
	if mask.shape == tuple(out_shape):
		return mask
	if stride > 1:
		mask = max_pool(mask, (stride,) * 3, stride)  # ty: ignore[invalid-argument-type]
	fitted = np.zeros(out_shape, dtype=bool)
	sx, sy, sz = (min(a, b) for a, b in zip(mask.shape, out_shape, strict=True))
	fitted[:sx, :sy, :sz] = mask[:sx, :sy, :sz]
	return fitted


def run_layers(
	weights: NetworkWeights, x: np.ndarray, mask: np.ndarray | None = None, upto: int | None = None
) -> Iterable[tuple[int, np.ndarray, np.ndarray | None]]:
	"""Run the stack layer by layer, yielding ``(layer_index, output, mask)``.

	``x`` has shape ``(C, X, Y, Z)``; ``mask`` (optional) follows the spatial
	resolution through pooling and strided convolutions. Stops after layer
	index ``upto`` when given.
	"""
	last = len(weights.layers) - 1 if upto is None else upto
	for i, layer in enumerate(weights.layers[: last + 1]):
		match layer.kind:
			case LayerKind.CONV3D:
				x = conv3d(x, layer)
				stride = layer.stride
			case LayerKind.RELU:
				x = np.maximum(x, 0.0)
				stride = 1
			case LayerKind.MAXPOOL:
				x = max_pool(x, layer.kernel, layer.stride)
				stride = layer.stride
		if mask is not None:
			mask = _downsample_mask(mask, x.shape[1:], stride)
		yield i, x, mask


def forward(weights: NetworkWeights, x: np.ndarray) -> np.ndarray:
	"""Full forward pass; ``x`` is ``(X, Y, Z)`` or ``(C, X, Y, Z)``."""
	x = np.asarray(x, dtype=np.float32)
	if x.ndim == 3:
		x = x[None]
	out = x
	for _, out, _ in run_layers(weights, x):
		pass
	return out


def prepare_input(v: Volume, m: RoiMask, side: int = 64) -> tuple[np.ndarray, np.ndarray]:
	"""Frame the ROI as a ``side``-cubed network input.

	Crops the tight bounding box of the mask, zero-pads it (centered) to a cube,
	and resamples the cube to ``side`` voxels per axis, trilinearly for
	intensities and by nearest neighbor for the mask. Voxels outside the
	resampled mask are zeroed.

	Raises:
		EmptyRoi: the mask has no foreground voxel.

	Returns:
		``(cube, cube_mask)`` as float32 and bool arrays of shape ``(side,) * 3``.
	"""
	if side < 1:
		raise ValueError(f"side must be positive, got {side}")
	m.check_aligned(v)
	m.require_nonempty()

	idx = np.argwhere(m.data)
	lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
	box = tuple(slice(a, b) for a, b in zip(lo, hi, strict=True))
	sub = np.where(m.data, v.data, 0.0)[box]
	sub_mask = m.data[box]

	edge = int(max(sub.shape))
	pad = [((edge - n) // 2, edge - n - (edge - n) // 2) for n in sub.shape]
	sub = np.pad(sub, pad)
	sub_mask = np.pad(sub_mask, pad)

	out_spacing = (edge / side,) * 3
	cube = resample_grid(sub, (1.0, 1.0, 1.0), out_spacing, (side,) * 3, order=1)
	cube_mask = (
		resample_grid(sub_mask.astype(np.uint8), (1.0, 1.0, 1.0), out_spacing, (side,) * 3, order=0)
		> 0
	)
	cube[~cube_mask] = 0.0
	return cube.astype(np.float32), cube_mask


def forward_activations(
	weights: NetworkWeights,
	cube: np.ndarray,
	cube_mask: np.ndarray,
	layers: Iterable[int],
) -> list[ActivationStack]:
	"""Return the ReLU feature maps of the requested activation layers.

	Convolutions are zero-padded cross-correlations; the mask is carried to
	each layer's resolution with the any-voxel rule.

	Args:
		weights: network to run.
		cube: input of shape ``(side,) * 3``.
		cube_mask: ROI mask aligned with ``cube``.
		layers: 1-based activation layer numbers.

	Raises:
		LayerError: a requested layer is not in ``1..n_activation_layers``.
		ValueError: the cube does not match the network's input side.

	Returns:
		One :class:`ActivationStack` per requested layer, in ascending order.
	"""
	wanted = sorted(set(layers))
	if not wanted:
		raise LayerError("No activation layer requested")
	bad = [layer for layer in wanted if not 1 <= layer <= weights.n_activation_layers]
	if bad:
		raise LayerError(
			f"Activation layer(s) {bad} out of range 1..{weights.n_activation_layers}"
		)

	cube = np.asarray(cube, dtype=np.float32)
	cube_mask = np.asarray(cube_mask, dtype=bool)
	if weights.input_side and cube.shape != (weights.input_side,) * 3:
		raise ValueError(
			f"Network expects a {weights.input_side}^3 input cube, got shape {cube.shape}"
		)
	if cube_mask.shape != cube.shape:
		raise ValueError(f"Mask shape {cube_mask.shape} does not match cube shape {cube.shape}")

	index_to_layer = {idx: n + 1 for n, idx in enumerate(weights.activation_indices)}
	upto = weights.activation_indices[wanted[-1] - 1]

	stacks: list[ActivationStack] = []
	for i, out, mask in run_layers(weights, cube[None], cube_mask, upto=upto):
		layer_id = index_to_layer.get(i)
		if layer_id in wanted:
			mask_copy = mask.copy()  # ty: ignore[possibly-missing-attribute]
			stacks.append(ActivationStack(layer_id, out.copy(), mask_copy))
	return stacks
