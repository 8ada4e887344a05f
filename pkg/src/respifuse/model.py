"""Model assembly: per-modality CNN extractors, contextual attention,
outer-product fusion, sex-aware classifier, and checkpoint I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .dsp import SpectrogramFrame
from .errors import (
    CorruptFile,
    MisalignedFrames,
    SexMissing,
    SexUnexpected,
    ShapeMismatch,
    UnstandardizedInput,
    VersionMismatch,
    WrongArity,
)
from .nncore import (
    Adam,
    AdaptiveAvgPool2d,
    BatchNorm2d,
    Conv2d,
    Dense,
    Dropout,
    MaxPool2d,
    Parameter,
    ReLU,
    SoftmaxCrossEntropy,
    softmax_probs,
)

MODALITY_ORDER = ("C", "B", "S")
MODALITY_SOUND = {"C": "cough", "B": "breath", "S": "speech"}
SOUND_MODALITY = {v: k for k, v in MODALITY_SOUND.items()}

FEATURE_DIM = 16
CLASSIFIER_INPUT_LEN = {1: 16, 2: 289, 3: 4913}

SEX_ENCODING = {"f": 0.0, "m": 1.0}

CHECKPOINT_MAGIC = b"RFUS"
CHECKPOINT_VERSION = 1


def canonical_modalities(modalities) -> tuple[str, ...]:
    mods = set(modalities)
    bad = mods - set(MODALITY_ORDER)
    if bad or not mods:
        raise ValueError(f"modalities must be a non-empty subset of C,B,S, got {modalities!r}")
    return tuple(m for m in MODALITY_ORDER if m in mods)


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[str, ...]
    use_attention: bool = False
    use_sex: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", canonical_modalities(self.modalities))

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "use_attention": self.use_attention,
            "use_sex": self.use_sex,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            modalities=tuple(d["modalities"]),
            use_attention=bool(d["use_attention"]),
            use_sex=bool(d["use_sex"]),
            seed=int(d["seed"]),
        )


@dataclass
class FeatureVector:
    values: np.ndarray  # shape (16,)
    sound_type: str

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (FEATURE_DIM,):
            raise ShapeMismatch(f"feature vector must have {FEATURE_DIM} entries")
        if not np.all(np.isfinite(self.values)):
            raise ShapeMismatch("feature vector must be finite")


class FeatureExtractor:
    """conv(3->16) -> BN -> ReLU -> maxpool -> conv(16->4) -> BN -> ReLU ->
    adaptive avg pool 2x2 -> flatten to 16 features.

    Takes (N, 3, H, W) batches but runs the stack in channels-outermost
    (CNHW) layout, converting once on entry: the pooling layers treat the
    two trailing axes as spatial either way, and the conv/batchnorm layers
    are built in CNHW mode, where the convolution GEMMs are fastest.
    """

    def __init__(self, rng: np.random.Generator, dtype=np.float32, name: str = "ext"):
        self.conv1 = Conv2d(3, 16, rng, dtype, f"{name}.conv1", skip_input_grad=True,
                            layout="CNHW")
        self.bn1 = BatchNorm2d(16, dtype, f"{name}.bn1", layout="CNHW")
        self.relu1 = ReLU(inplace=True)
        self.pool = MaxPool2d()
        self.conv2 = Conv2d(16, 4, rng, dtype, f"{name}.conv2", layout="CNHW")
        self.bn2 = BatchNorm2d(4, dtype, f"{name}.bn2", layout="CNHW")
        self.relu2 = ReLU(inplace=True)
        self.avgpool = AdaptiveAvgPool2d()
        self.name = name

    def params(self) -> list[Parameter]:
        return (self.conv1.params() + self.bn1.params()
                + self.conv2.params() + self.bn2.params())

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.params()}
        out[f"{self.name}.bn1.running_mean"] = self.bn1.running_mean
        out[f"{self.name}.bn1.running_var"] = self.bn1.running_var
        out[f"{self.name}.bn2.running_mean"] = self.bn2.running_mean
        out[f"{self.name}.bn2.running_var"] = self.bn2.running_var
        return out

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"extractor expects (N,3,H,W), got {x.shape}")
        h = np.ascontiguousarray(x.transpose(1, 0, 2, 3))  # -> CNHW
        h = self.conv1.forward(h, mode)
        h = self.bn1.forward(h, mode)
        h = self.relu1.forward(h, mode)
        h = self.pool.forward(h, mode)
        h = self.conv2.forward(h, mode)
        h = self.bn2.forward(h, mode)
        h = self.relu2.forward(h, mode)
        h = self.avgpool.forward(h, mode)  # (4, N, 2, 2)
        return np.ascontiguousarray(h.transpose(1, 0, 2, 3)).reshape(-1, FEATURE_DIM)

    def backward(self, dout: np.ndarray) -> None:
        d = np.ascontiguousarray(
            dout.reshape(-1, 4, 2, 2).transpose(1, 0, 2, 3))
        d = self.avgpool.backward(d)
        d = self.relu2.backward(d)
        d = self.bn2.backward(d)
        d = self.conv2.backward(d)
        d = self.pool.backward(d)
        d = self.relu1.backward(d)
        d = self.bn1.backward(d)
        self.conv1.backward(d)


def extract_features(extractor: FeatureExtractor, frame: SpectrogramFrame) -> FeatureVector:
    """Run one standardized spectrogram frame through an extractor (eval mode)."""
    if not frame.standardized:
        raise UnstandardizedInput(
            f"frame {frame.patient_id}/{frame.sound_type}/{frame.frame_index} is not standardized")
    out = extractor.forward(frame.pixels[None, ...], mode="eval")
    return FeatureVector(values=out[0], sound_type=frame.sound_type)


class ContextualAttention:
    """Learned gating of the 16 feature coordinates.

    u = tanh(W f + b); logits l_i = u_i * uc_i; alpha = softmax(l) over the
    16 coordinates; output = alpha * f elementwise.
    """

    def __init__(self, rng: np.random.Generator, dtype=np.float32, name: str = "att"):
        scale = 1.0 / np.sqrt(FEATURE_DIM)
        self.W = Parameter((rng.standard_normal((FEATURE_DIM, FEATURE_DIM)) * scale).astype(dtype),
                           f"{name}.W")
        self.b = Parameter(np.zeros(FEATURE_DIM, dtype=dtype), f"{name}.b")
        self.u_c = Parameter((rng.standard_normal(FEATURE_DIM) * scale).astype(dtype),
                             f"{name}.u_c")
        self._cache = None

    def params(self) -> list[Parameter]:
        return [self.W, self.b, self.u_c]

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params()}

    def forward(self, f: np.ndarray, mode: str = "train") -> np.ndarray:
        if f.ndim != 2 or f.shape[1] != FEATURE_DIM:
            raise ShapeMismatch(f"attention expects (N,{FEATURE_DIM}), got {f.shape}")
        u = np.tanh(f @ self.W.data.T + self.b.data)
        logits = u * self.u_c.data
        z = logits - logits.max(axis=1, keepdims=True)
        ez = np.exp(z)
        alpha = ez / ez.sum(axis=1, keepdims=True)
        self._cache = (f, u, alpha)
        return alpha * f

    def attention_weights(self, f: np.ndarray) -> np.ndarray:
        self.forward(f, mode="eval")
        _, _, alpha = self._cache
        self._cache = None
        return alpha

    def backward(self, dout: np.ndarray) -> np.ndarray:
        f, u, alpha = self._cache
        self._cache = None
        dalpha = dout * f
        df = dout * alpha
        # softmax jacobian
        dlogits = alpha * (dalpha - (dalpha * alpha).sum(axis=1, keepdims=True))
        du = dlogits * self.u_c.data
        self.u_c.grad += (dlogits * u).sum(axis=0)
        dpre = du * (1.0 - u * u)
        self.W.grad += dpre.T @ f
        self.b.grad += dpre.sum(axis=0)
        df += dpre @ self.W.data
        return df


class OuterFusion:
    """Outer product of trailing-one-augmented feature vectors, flattened
    row-major. The unimodal vectors survive on the edges of the cube."""

    def __init__(self):
        self._cache = None

    def forward(self, features: list[np.ndarray]) -> np.ndarray:
        k = len(features)
        if k not in (2, 3):
            raise WrongArity(f"fusion takes 2 or 3 modalities, got {k}")
        n = features[0].shape[0]
        aug = []
        for f in features:
            if f.shape != features[0].shape:
                raise ShapeMismatch("all feature batches must share a shape")
            aug.append(np.concatenate([f, np.ones((n, 1), dtype=f.dtype)], axis=1))
        self._cache = aug
        if k == 2:
            out = np.einsum("ni,nj->nij", aug[0], aug[1])
        else:
            out = np.einsum("ni,nj,nk->nijk", aug[0], aug[1], aug[2])
        return out.reshape(n, -1)

    def backward(self, dout: np.ndarray) -> list[np.ndarray]:
        aug = self._cache
        self._cache = None
        n = aug[0].shape[0]
        d = aug[0].shape[1]
        if len(aug) == 2:
            dcube = dout.reshape(n, d, d)
            da = np.einsum("nij,nj->ni", dcube, aug[1])
            db = np.einsum("nij,ni->nj", dcube, aug[0])
            grads = [da, db]
        else:
            dcube = dout.reshape(n, d, d, d)
            da = np.einsum("nijk,nj,nk->ni", dcube, aug[1], aug[2])
            db = np.einsum("nijk,ni,nk->nj", dcube, aug[0], aug[2])
            dc = np.einsum("nijk,ni,nj->nk", dcube, aug[0], aug[1])
            grads = [da, db, dc]
        return [g[:, :-1] for g in grads]  # drop the augmentation coordinate


def outer_fuse(features: list[FeatureVector]) -> np.ndarray:
    """Single-vector fusion (spec surface over the batched OuterFusion)."""
    fusion = OuterFusion()
    out = fusion.forward([np.asarray(f.values, dtype=np.float64)[None, :] for f in features])
    return out[0]


class Classifier:
    """dropout(0.3) -> dense(L -> 8) -> ReLU -> [concat sex] -> dense(-> 2)."""

    def __init__(self, input_len: int, use_sex: bool, rng: np.random.Generator,
                 dtype=np.float32, name: str = "clf"):
        self.input_len = input_len
        self.use_sex = use_sex
        self.dropout = Dropout(0.3)
        self.fc1 = Dense(input_len, 8, rng, dtype, f"{name}.fc1")
        self.relu = ReLU()
        self.fc2 = Dense(9 if use_sex else 8, 2, rng, dtype, f"{name}.fc2")

    def params(self) -> list[Parameter]:
        return self.fc1.params() + self.fc2.params()

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params()}

    def forward(self, x: np.ndarray, sex: np.ndarray | None, mode: str = "train",
                rng: np.random.Generator | None = None) -> np.ndarray:
        if x.shape[1] != self.input_len:
            raise ShapeMismatch(f"classifier expects length {self.input_len}, got {x.shape[1]}")
        if self.use_sex and sex is None:
            raise SexMissing("this model requires a sex input")
        if not self.use_sex and sex is not None:
            raise SexUnexpected("this model does not take a sex input")
        h = self.dropout.forward(x, mode, rng)
        h = self.fc1.forward(h, mode)
        h = self.relu.forward(h, mode)
        if self.use_sex:
            h = np.concatenate([h, np.asarray(sex, dtype=h.dtype).reshape(-1, 1)], axis=1)
        return self.fc2.forward(h, mode)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = self.fc2.backward(dlogits)
        if self.use_sex:
            d = d[:, :-1]
        d = self.relu.backward(d)
        d = self.fc1.backward(d)
        return self.dropout.backward(d)


class CovidModel:
    """Full network: per-modality extractors, optional attention, fusion for
    multi-type configs, and the classification block."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(config.seed)
        self.extractors = {m: FeatureExtractor(rng, dtype, f"ext.{m}")
                           for m in config.modalities}
        self.attentions = ({m: ContextualAttention(rng, dtype, f"att.{m}")
                            for m in config.modalities}
                           if config.use_attention else {})
        k = len(config.modalities)
        self.fusion = OuterFusion() if k >= 2 else None
        self.classifier = Classifier(CLASSIFIER_INPUT_LEN[k], config.use_sex, rng, dtype)
        self.loss_head = SoftmaxCrossEntropy()

    def params(self) -> list[Parameter]:
        out = []
        for m in self.config.modalities:
            out.extend(self.extractors[m].params())
            if self.attentions:
                out.extend(self.attentions[m].params())
        out.extend(self.classifier.params())
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.config.modalities:
            out.update(self.extractors[m].state_tensors())
            if self.attentions:
                out.update(self.attentions[m].state_tensors())
        out.update(self.classifier.state_tensors())
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        own = self.state_tensors()
        for name, arr in own.items():
            if name not in tensors:
                raise CorruptFile(f"checkpoint is missing tensor {name!r}")
            if tensors[name].shape != arr.shape:
                raise CorruptFile(f"tensor {name!r} has shape {tensors[name].shape}, "
                                  f"expected {arr.shape}")
            arr[...] = tensors[name]

    def set_batchnorm_tracking(self, track: bool):
        for m in self.config.modalities:
            self.extractors[m].bn1.track_running = track
            self.extractors[m].bn2.track_running = track

    def forward(self, frames: dict[str, np.ndarray], sex: np.ndarray | None,
                mode: str = "train", rng: np.random.Generator | None = None) -> np.ndarray:
        """Batched forward pass to logits. ``frames`` maps modality letter to a
        (N, 3, H, W) array of standardized pixels, aligned across modalities."""
        feats = []
        for m in self.config.modalities:
            f = self.extractors[m].forward(frames[m], mode)
            if self.attentions:
                f = self.attentions[m].forward(f, mode)
            feats.append(f)
        fused = self.fusion.forward(feats) if self.fusion else feats[0]
        return self.classifier.forward(fused, sex, mode, rng)

    def backward(self, dlogits: np.ndarray) -> None:
        d = self.classifier.backward(dlogits)
        dfeats = self.fusion.backward(d) if self.fusion else [d]
        for m, df in zip(self.config.modalities, dfeats):
            if self.attentions:
                df = self.attentions[m].backward(df)
            self.extractors[m].backward(df)

    def predict_proba(self, frames: dict[str, np.ndarray],
                      sex: np.ndarray | None) -> np.ndarray:
        logits = self.forward(frames, sex, mode="eval")
        return softmax_probs(logits)


def forward_patient_frames(model: CovidModel, frames: dict[str, SpectrogramFrame],
                           sex: float | None) -> np.ndarray:
    """Score one aligned set of per-modality frames; returns a probability pair."""
    pids = {f.patient_id for f in frames.values()}
    idxs = {f.frame_index for f in frames.values()}
    if len(pids) > 1 or len(idxs) > 1:
        raise MisalignedFrames(f"frames span patients {pids} / indices {idxs}")
    batch = {}
    for m in model.config.modalities:
        sf = frames[m]
        if not sf.standardized:
            raise UnstandardizedInput(f"frame {sf.patient_id}/{sf.sound_type} not standardized")
        batch[m] = sf.pixels[None, ...].astype(model.dtype)
    sex_arr = None if sex is None else np.array([sex])
    return model.predict_proba(batch, sex_arr)[0]


# --- checkpoint I/O ---

def save_checkpoint(model: CovidModel, path: str, optimizer: Adam | None = None) -> str:
    """Binary checkpoint: magic, version, JSON header, raw little-endian tensors."""
    tensors = dict(model.state_tensors())
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    manifest = []
    offset = 0
    payloads = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        manifest.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
        })
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({
        "config": model.config.to_dict(),
        "has_optimizer": optimizer is not None,
        "tensors": manifest,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)
    return path


def read_checkpoint(path: str) -> tuple[ModelConfig, dict[str, np.ndarray], bool]:
    """Parse a checkpoint file into (config, tensors, has_optimizer)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path!r}: bad magic bytes")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path!r}: format version {version}, expected {CHECKPOINT_VERSION}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    try:
        header = json.loads(blob[16:16 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path!r}: unreadable header") from exc
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise CorruptFile(f"{path!r}: truncated tensor payload for {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(
            blob[start:end], dtype=dtype).reshape(shape).copy()
    return ModelConfig.from_dict(header["config"]), tensors, bool(header["has_optimizer"])


def load_checkpoint(path: str, expected_config: ModelConfig | None = None,
                    dtype=np.float32) -> tuple[CovidModel, dict[str, np.ndarray] | None]:
    """Rebuild a model (and optimizer state tensors, if stored) from disk."""
    config, tensors, has_opt = read_checkpoint(path)
    if expected_config is not None and config != expected_config:
        raise VersionMismatch(
            f"checkpoint config {config} does not match expected {expected_config}")
    model = CovidModel(config, dtype=dtype)
    model.load_state_tensors(tensors)
    opt_state = None
    if has_opt:
        opt_state = {k: v for k, v in tensors.items() if k.startswith("adam.")}
    return model, opt_state
