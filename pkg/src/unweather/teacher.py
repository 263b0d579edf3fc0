"""Frozen teacher encoders supplying distillation features and weather priors.

Three interchangeable backends sit behind one interface:

* ``StubTeacher`` — a seeded random-weight conv pyramid, cheap and fully
  deterministic, used by the test suite and desk-scale training.
* ``ImageNetTeacher`` — a torchvision ResNet classifier (optionally loaded
  from a local state dict), for prior/distillation ablations.
* ``ClipTeacher`` — wraps a locally installed vision-language checkpoint;
  raises a descriptive error when the backend or weights are missing.

Every backend is frozen: identical inputs yield identical outputs and no
gradient ever reaches teacher parameters.  Stage features can be persisted
in an on-disk cache keyed by (teacher name, image content hash).
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import TeacherLoadError
from .synth import weather_prompts

CACHE_ENV_VAR = "UNWEATHER_CACHE_DIR"
WEIGHTS_ENV_VAR = "UNWEATHER_TEACHER_DIR"


@dataclass
class TeacherSpec:
    """Static description of a teacher backbone."""

    name: str
    stage_indices: tuple[int, ...] = (0, 2, 3, 4)   # pyramid stages used for distillation
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    stage_strides: tuple[int, ...] = (2, 4, 8, 16, 32)
    embed_dim: int = 512
    input_size: int = 224
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def distill_channels(self) -> list[int]:
        return [self.stage_channels[i] for i in self.stage_indices]


def _as_batch(image: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if image.dim() == 3:
        return image.unsqueeze(0), True
    if image.dim() == 4:
        return image, False
    raise ValueError(f"expected (3,H,W) or (B,3,H,W), got shape {tuple(image.shape)}")


def channel_match(feature: torch.Tensor, target_channels: int) -> torch.Tensor:
    """Match channel count via parameter-free adaptive average pooling.

    Output channel k is the mean of a contiguous bin of input channels;
    spatial dims are untouched.  Identity when counts already agree.
    """
    squeeze = False
    if feature.dim() == 3:
        feature, squeeze = feature.unsqueeze(0), True
    b, c, h, w = feature.shape
    if c != target_channels:
        flat = feature.flatten(2).transpose(1, 2)            # (B, HW, C)
        flat = F.adaptive_avg_pool1d(flat, target_channels)  # (B, HW, C_t)
        feature = flat.transpose(1, 2).reshape(b, target_channels, h, w)
    return feature.squeeze(0) if squeeze else feature


def resize_match(feature: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize to the target spatial size (align_corners off)."""
    squeeze = feature.dim() == 3
    if squeeze:
        feature = feature.unsqueeze(0)
    if feature.shape[-2:] != tuple(target_hw):
        feature = F.interpolate(feature, size=tuple(target_hw), mode="bilinear", align_corners=False)
    return feature.squeeze(0) if squeeze else feature


def _prompt_anchor(prompt: str, dim: int) -> np.ndarray:
    """Deterministic unit vector derived from the prompt text alone."""
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


class Teacher(nn.Module):
    """Base class: frozen feature/prior provider."""

    def __init__(self, spec: TeacherSpec):
        super().__init__()
        self.spec = spec

    def _freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _prepare(self, image: torch.Tensor) -> torch.Tensor:
        size = self.spec.input_size
        if image.shape[-2:] != (size, size):
            image = F.interpolate(image, size=(size, size), mode="bilinear", align_corners=False)
        mean = image.new_tensor(self.spec.mean).view(1, 3, 1, 1)
        std = image.new_tensor(self.spec.std).view(1, 3, 1, 1)
        return (image - mean) / std

    def _pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        raise NotImplementedError

    def _embed(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        raise NotImplementedError

    @torch.no_grad()
    def stage_features(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Feature map per configured distillation stage."""
        batch, single = _as_batch(image)
        pyramid = self._pyramid(self._prepare(batch))
        feats = [pyramid[i] for i in self.spec.stage_indices]
        return [f.squeeze(0) for f in feats] if single else feats

    @torch.no_grad()
    def global_embedding(self, image: torch.Tensor) -> torch.Tensor:
        """Fixed-dimension weather prior vector."""
        batch, single = _as_batch(image)
        emb = self._embed(self._pyramid(self._prepare(batch)))
        return emb.squeeze(0) if single else emb

    @torch.no_grad()
    def text_class_embeddings(self, prompts: list[str] | None = None) -> torch.Tensor:
        """One L2-normalized row per class prompt.

        Backends without a text encoder fall back to deterministic
        hash-derived anchors in the embedding space.
        """
        prompts = list(prompts) if prompts is not None else weather_prompts()
        rows = np.stack([_prompt_anchor(p, self.spec.embed_dim) for p in prompts])
        return torch.from_numpy(rows).float()


class StubTeacher(Teacher):
    """Seeded random-weight conv pyramid; frozen, deterministic, CI-cheap."""

    def __init__(self, spec: TeacherSpec | None = None, seed: int = 0):
        spec = spec or TeacherSpec(name=f"stub-{seed}")
        super().__init__(spec)
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = 3
        for out_ch in spec.stage_channels:
            conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1)
            conv.weight.data.normal_(0.0, (2.0 / (9 * in_ch)) ** 0.5, generator=gen)
            conv.bias.data.zero_()
            convs.append(conv)
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        head = nn.Linear(sum(spec.stage_channels), spec.embed_dim)
        head.weight.data.normal_(0.0, sum(spec.stage_channels) ** -0.5, generator=gen)
        head.bias.data.zero_()
        self.head = head
        self._freeze()

    def _pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = F.gelu(conv(x))
            feats.append(x)
        return feats

    def _embed(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        pooled = torch.cat([f.mean(dim=(2, 3)) for f in pyramid], dim=1)
        return self.head(pooled)


class ImageNetTeacher(Teacher):
    """Frozen torchvision ResNet-18 pyramid (optionally with local weights)."""

    def __init__(self, weights_path: str | None = None):
        from torchvision.models import resnet18

        spec = TeacherSpec(
            name="imagenet-resnet18",
            stage_channels=(64, 64, 128, 256, 512),
            embed_dim=512,
            mean=(0.485, 0.456, 0.406),
            std=(0.229, 0.224, 0.225),
        )
        super().__init__(spec)
        net = resnet18(weights=None)
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        self.net = net
        self._freeze()

    def _pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        net = self.net
        x = net.relu(net.bn1(net.conv1(x)))
        f0 = x
        x = net.maxpool(x)
        f1 = net.layer1(x)
        f2 = net.layer2(f1)
        f3 = net.layer3(f2)
        f4 = net.layer4(f3)
        return [f0, f1, f2, f3, f4]

    def _embed(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        return pyramid[-1].mean(dim=(2, 3))


class ClipTeacher(Teacher):
    """Wrapper for a locally available CLIP-style vision-language checkpoint.

    Weight files are looked up under ``weights_dir`` (or the directory named
    by the environment variable) and loaded through the optional
    ``open_clip`` package.  This backend is never used by the test suite.
    """

    def __init__(self, weights_dir: str | None = None, model_name: str = "ViT-B-32"):
        weights_dir = weights_dir or os.environ.get(WEIGHTS_ENV_VAR)
        try:
            import open_clip  # noqa: F401
        except ImportError as exc:
            raise TeacherLoadError(
                "the vision-language teacher needs the open_clip package: "
                "`pip install open_clip_torch`, download the checkpoint, and "
                f"place it under --teacher-weights-dir or ${WEIGHTS_ENV_VAR}"
            ) from exc
        if not weights_dir or not Path(weights_dir).exists():
            raise TeacherLoadError(
                f"no teacher weights directory found (looked at {weights_dir!r}); "
                f"pass teacher.weights_dir or set ${WEIGHTS_ENV_VAR}"
            )
        import open_clip

        ckpt = Path(weights_dir) / f"{model_name}.pt"
        if not ckpt.exists():
            raise TeacherLoadError(f"expected checkpoint at {ckpt}")
        spec = TeacherSpec(
            name=f"clip-{model_name}",
            embed_dim=512,
            mean=(0.48145466, 0.4578275, 0.40821073),
            std=(0.26862954, 0.26130258, 0.27577711),
        )
        super().__init__(spec)
        self.model = open_clip.create_model(model_name, pretrained=str(ckpt))
        self.tokenizer = open_clip.get_tokenizer(model_name)
        self._freeze()

    def _pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        visual = self.model.visual
        if not hasattr(visual, "stem") and not hasattr(visual, "layer1"):
            raise TeacherLoadError(
                "distillation stage features need a convolutional vision tower "
                "(e.g. RN50x4); the loaded checkpoint is ViT-style"
            )
        feats = []
        x = visual.stem(x) if hasattr(visual, "stem") else x
        feats.append(x)
        for name in ("layer1", "layer2", "layer3", "layer4"):
            x = getattr(visual, name)(x)
            feats.append(x)
        return feats

    def _embed(self, pyramid):  # pragma: no cover - exercised only with real weights
        raise NotImplementedError

    @torch.no_grad()
    def global_embedding(self, image: torch.Tensor) -> torch.Tensor:
        batch, single = _as_batch(image)
        emb = self.model.encode_image(self._prepare(batch))
        return emb.squeeze(0) if single else emb

    @torch.no_grad()
    def text_class_embeddings(self, prompts: list[str] | None = None) -> torch.Tensor:
        prompts = list(prompts) if prompts is not None else weather_prompts()
        tokens = self.tokenizer(prompts)
        emb = self.model.encode_text(tokens)
        return F.normalize(emb, dim=-1).float()


_CACHE_MAGIC = b"UWFC"
_CACHE_VERSION = 1


class FeatureCache:
    """One binary blob per key: small header, raw arrays, payload checksum.

    Writes are atomic (temp file then rename) so concurrent readers never
    observe a partial blob.
    """

    def __init__(self, cache_dir: str | None = None):
        cache_dir = cache_dir or os.environ.get(CACHE_ENV_VAR)
        if cache_dir is None:
            raise ValueError(f"no cache directory given and ${CACHE_ENV_VAR} unset")
        self.root = Path(cache_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(teacher_name: str, image: torch.Tensor) -> str:
        arr = np.ascontiguousarray(image.detach().cpu().numpy())
        h = hashlib.sha256(teacher_name.encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
        return h.hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.feat"

    def put(self, key: str, teacher_name: str, arrays: list[np.ndarray]) -> None:
        payload_hash = hashlib.sha256()
        name_bytes = teacher_name.encode("utf-8")
        chunks = [_CACHE_MAGIC, struct.pack("<II", _CACHE_VERSION, len(name_bytes)), name_bytes,
                  struct.pack("<I", len(arrays))]
        for arr in arrays:
            arr = np.ascontiguousarray(arr)
            dtype = arr.dtype.str.encode("ascii")
            chunks.append(struct.pack("<I", len(dtype)))
            chunks.append(dtype)
            chunks.append(struct.pack("<I", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            raw = arr.tobytes()
            chunks.append(struct.pack("<Q", len(raw)))
            chunks.append(raw)
            payload_hash.update(raw)
        chunks.append(payload_hash.digest())
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, self._path(key))

    def get(self, key: str) -> list[np.ndarray] | None:
        path = self._path(key)
        if not path.exists():
            return None
        blob = path.read_bytes()
        if blob[:4] != _CACHE_MAGIC:
            raise ValueError(f"corrupt cache blob {path}: bad magic")
        off = 4
        _, name_len = struct.unpack_from("<II", blob, off)
        off += 8 + name_len
        (narrays,) = struct.unpack_from("<I", blob, off)
        off += 4
        arrays = []
        payload_hash = hashlib.sha256()
        for _ in range(narrays):
            (dtype_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            dtype = blob[off:off + dtype_len].decode("ascii")
            off += dtype_len
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, off)
            off += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", blob, off)
            off += 8
            raw = blob[off:off + nbytes]
            off += nbytes
            payload_hash.update(raw)
            arrays.append(np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(shape).copy())
        if blob[off:off + 32] != payload_hash.digest():
            raise ValueError(f"corrupt cache blob {path}: checksum mismatch")
        return arrays


class CachedTeacher:
    """Per-image on-disk caching front for any teacher backend."""

    def __init__(self, teacher: Teacher, cache_dir: str | None = None):
        self.teacher = teacher
        self.spec = teacher.spec
        self.cache = FeatureCache(cache_dir)

    def stage_features(self, image: torch.Tensor) -> list[torch.Tensor]:
        batch, single = _as_batch(image)
        per_image = []
        for img in batch:
            key = FeatureCache.key(self.spec.name + ":stages", img)
            hit = self.cache.get(key)
            if hit is None:
                feats = self.teacher.stage_features(img)
                self.cache.put(key, self.spec.name, [f.cpu().numpy() for f in feats])
                per_image.append(feats)
            else:
                per_image.append([torch.from_numpy(a) for a in hit])
        if single:
            return per_image[0]
        return [torch.stack([feats[j] for feats in per_image]) for j in range(len(per_image[0]))]

    def global_embedding(self, image: torch.Tensor) -> torch.Tensor:
        batch, single = _as_batch(image)
        rows = []
        for img in batch:
            key = FeatureCache.key(self.spec.name + ":embed", img)
            hit = self.cache.get(key)
            if hit is None:
                emb = self.teacher.global_embedding(img)
                self.cache.put(key, self.spec.name, [emb.cpu().numpy()])
                rows.append(emb)
            else:
                rows.append(torch.from_numpy(hit[0]))
        return rows[0] if single else torch.stack(rows)

    def text_class_embeddings(self, prompts: list[str] | None = None) -> torch.Tensor:
        return self.teacher.text_class_embeddings(prompts)


def build_teacher(kind: str = "stub", *, seed: int = 0, input_size: int | None = None,
                  stage_channels: tuple[int, ...] | None = None, embed_dim: int | None = None,
                  weights_dir: str | None = None, weights_path: str | None = None) -> Teacher:
    """Factory used by config loading; stub parameters are overridable."""
    if kind == "stub":
        spec = TeacherSpec(name=f"stub-{seed}")
        if input_size is not None:
            spec.input_size = input_size
        if stage_channels is not None:
            spec.stage_channels = tuple(stage_channels)
        if embed_dim is not None:
            spec.embed_dim = embed_dim
        return StubTeacher(spec, seed=seed)
    if kind == "imagenet":
        return ImageNetTeacher(weights_path=weights_path)
    if kind == "clip":
        return ClipTeacher(weights_dir=weights_dir)
    raise ValueError(f"unknown teacher kind {kind!r}, expected stub | imagenet | clip")
