import numpy as np
import torch
from PIL import Image


def read_frame(path):
    """Load an image as float64 ``H x W x 3`` in [0, 1]."""
    with Image.open(path) as im:
        if im.mode.startswith("I;16"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def write_frame(path, frame):
    arr = np.asarray(frame, dtype=np.float64)
    arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def to_tensor(frame, dtype=torch.float32):
    """``H x W x 3`` array to a ``1 x 3 x H x W`` tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.transpose(frame, (2, 0, 1))))[None].to(dtype)


def to_array(tensor):
    return tensor.detach().cpu().double().numpy()[0].transpose(1, 2, 0)
