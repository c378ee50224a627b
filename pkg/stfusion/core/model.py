from __future__ import annotations

import numpy as np
from loguru import logger

from stfusion.core.decoder import DecoderParams, decode, predict
from stfusion.core.encoder import EncoderParams, encode_pair
from stfusion.core.entities import DimensionError, ModelConfig
from stfusion.core.params import ParamsModel
from stfusion.core.tensor import Tensor, as_tensor, no_grad, tensor


class ChangeDetector(ParamsModel):
    """Siamese VSS encoder plus STSS decoder, mapping an image pair to (N, 2, H, W) logits."""

    cfg: ModelConfig
    encoder: EncoderParams
    decoder: DecoderParams

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "ChangeDetector":
        rng = np.random.default_rng(seed)
        encoder = EncoderParams.create(rng, cfg.encoder, cfg.d_state, cfg.expand, cfg.dt_rank)
        decoder = DecoderParams.create(rng, cfg)
        model = cls(cfg=cfg, encoder=encoder, decoder=decoder)
        logger.debug(
            f"Built change detector with {model.parameter_count()} parameters, "
            f"mechanisms={[k.value for k in cfg.mechanisms]}, ecr={cfg.ecr}"
        )
        return model

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        x1, x2 = as_tensor(x1), as_tensor(x2)
        pyr1, pyr2 = encode_pair(x1, x2, self.cfg.encoder, self.encoder)
        return decode(pyr1, pyr2, self.decoder, (x1.shape[2], x1.shape[3]))

    __call__ = forward

    def infer_logits(self, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
        """Full-resolution logits for (N, 3, H, W) arrays of any size, reflect-padded to the input multiple."""
        if pre.shape != post.shape:
            raise DimensionError(f"Pre- and post-event images differ in shape: {pre.shape} vs {post.shape}")
        h, w = pre.shape[2:]
        multiple = self.cfg.encoder.input_multiple
        pad = ((0, 0), (0, 0), (0, -h % multiple), (0, -w % multiple))
        if any(after for _, after in pad):
            logger.debug(f"Reflect-padding {h}x{w} input to a multiple of {multiple}")
            pre = _reflect_pad(pre, pad)
            post = _reflect_pad(post, pad)
        with no_grad():
            logits = self.forward(tensor(pre), tensor(post))
        return logits.data[:, :, :h, :w]

    def predict(self, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
        return predict(self.infer_logits(pre, post))


def _reflect_pad(x: np.ndarray, pad) -> np.ndarray:
    # reflect needs extent > pad; fall back to symmetric edges for tiny images
    h, w = x.shape[2:]
    if pad[2][1] >= h or pad[3][1] >= w:
        return np.pad(x, pad, mode="symmetric")
    return np.pad(x, pad, mode="reflect")
