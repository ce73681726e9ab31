"""Embedding backends: the pretrained transformer, and a deterministic stub.

The transformer backend resizes 28x28 inputs to 224x224 (bilinear),
replicates grayscale to three channels, applies the model's normalization,
and pools the class token, the distillation token, or their mean.
Everything runs in inference mode, so extraction is deterministic.
"""

import numpy as np

POOLINGS = ("cls", "distill", "mean_of_both")

DEFAULT_MODEL_ID = "facebook/deit-base-distilled-patch16-224"
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class EmbedderError(RuntimeError):
    pass


class TransformerEmbedder:
    """Frozen pretrained image transformer (lazy torch/transformers import)."""

    def __init__(self, model_id: str = DEFAULT_MODEL_ID, device: str = "cpu", image_size: int = 224):
        try:
            import torch
            from transformers import AutoModel
        except ImportError as e:
            raise EmbedderError(f"transformer backend needs torch+transformers: {e}")
        self._torch = torch
        self.model_id = model_id
        self.image_size = image_size
        try:
            self.model = AutoModel.from_pretrained(model_id)
        except Exception as e:  # noqa: BLE001 - download/cache failures vary
            raise EmbedderError(f"could not load pretrained weights for {model_id!r}: {e}")
        self.model.eval().to(device)
        self.device = device

    @property
    def dim(self):
        return self.model.config.hidden_size

    def _preprocess(self, images: np.ndarray) -> np.ndarray:
        from PIL import Image

        out = np.empty((images.shape[0], 3, self.image_size, self.image_size), dtype=np.float32)
        for i, img in enumerate(images):
            if img.ndim == 2:
                img = np.repeat(img[:, :, None], 3, axis=2)
            pil = Image.fromarray(img.astype(np.uint8)).resize(
                (self.image_size, self.image_size), Image.BILINEAR
            )
            arr = np.asarray(pil, dtype=np.float32) / 255.0
            out[i] = ((arr - IMAGENET_MEAN) / IMAGENET_STD).transpose(2, 0, 1)
        return out

    def embed(self, images: np.ndarray, pooling: str, batch_size: int = 64) -> np.ndarray:
        if pooling not in POOLINGS:
            raise EmbedderError(f"pooling must be one of {POOLINGS}")
        torch = self._torch
        chunks = []
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                pixels = torch.from_numpy(self._preprocess(images[start : start + batch_size]))
                hidden = self.model(pixel_values=pixels.to(self.device)).last_hidden_state
                cls_tok = hidden[:, 0]
                dist_tok = hidden[:, 1]
                if pooling == "cls":
                    emb = cls_tok
                elif pooling == "distill":
                    emb = dist_tok
                else:
                    emb = (cls_tok + dist_tok) / 2
                chunks.append(emb.cpu().numpy().astype(np.float32))
        return np.concatenate(chunks) if chunks else np.zeros((0, self.dim), np.float32)


class StubEmbedder:
    """Deterministic stand-in for offline tests: a fixed random projection.

    Produces the same interface and determinism guarantees as the real
    backend (identical inputs yield byte-identical features) without any
    pretrained weights.
    """

    model_id = "stub"

    def __init__(self, dim: int = 16, seed: int = 0):
        self._dim = dim
        self.seed = seed
        self._proj = {}

    @property
    def dim(self):
        return self._dim

    def embed(self, images: np.ndarray, pooling: str, batch_size: int = 64) -> np.ndarray:
        if pooling not in POOLINGS:
            raise EmbedderError(f"pooling must be one of {POOLINGS}")
        flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
        key = (flat.shape[1], pooling)
        if key not in self._proj:
            rng = np.random.default_rng([self.seed, flat.shape[1], POOLINGS.index(pooling)])
            self._proj[key] = rng.normal(0, 1, (flat.shape[1], self._dim))
        z = flat @ self._proj[key]
        return np.tanh(z).astype(np.float32)
