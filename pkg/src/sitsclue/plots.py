"""Figure export: CAM / CB-CAM / mask panels and temporal-to-class attention over time."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .affinity import extract_t2c_attention  # noqa: E402
from .data import write_tensor_file  # noqa: E402
from .encoder import unpatchify_labels  # noqa: E402
from .training import class_maps, generate_pseudo_labels  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_PNG_META = {"Software": None}


def _upsample(maps, config):
    # [S, N, K] -> [S, K, H, W]
    t = torch.as_tensor(maps).transpose(-1, -2)
    return unpatchify_labels(t, config).numpy()


def plot_panels(model, bank, split, cfg, path):
    """One row per sample: composite image, ground truth, raw CAM, CB-CAM and both pseudo masks."""
    config = model.config
    raw = _upsample(class_maps(model, bank, split.series, split.labels, cfg, "raw_cam"), config)
    raw_masks, _ = generate_pseudo_labels(model, bank, split.series, split.labels, cfg, "raw_cam")
    have_bank = bank is not None
    if have_bank:
        cb = _upsample(class_maps(model, bank, split.series, split.labels, cfg, "cb_cam"), config)
        cb_masks, _ = generate_pseudo_labels(model, bank, split.series, split.labels, cfg, "cb_cam")
        write_tensor_file(path.with_name("cb_cam.stsr"), cb.astype(np.float32))
    cols = ["image", "ground truth", "raw CAM", "raw mask"] + (["CB-CAM", "CB mask"] if have_bank else [])
    S = len(split.ids)
    fig, axes = plt.subplots(S, len(cols), figsize=(2.0 * len(cols), 2.0 * S), squeeze=False)
    K = config.K
    for i in range(S):
        composite = split.series[i].mean(axis=(0, 1))
        panels = [(composite, "gray", None), (split.masks[i], "tab10", (0, 9)),
                  (raw[i].max(axis=0), "viridis", (0, 1)), (raw_masks[i], "tab10", (0, 9))]
        if have_bank:
            panels += [(cb[i].max(axis=0), "viridis", (0, 1)), (cb_masks[i], "tab10", (0, 9))]
        for j, (img, cmap, lim) in enumerate(panels):
            ax = axes[i, j]
            kw = {} if lim is None else {"vmin": lim[0], "vmax": lim[1]}
            ax.imshow(img, cmap=cmap, interpolation="nearest", **kw)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(cols[j], fontsize=8)
        present = [str(k + 1) for k in range(K) if split.labels[i, k] > 0]
        axes[i, 0].set_ylabel(f"{split.ids[i]}\nclasses {','.join(present) or '-'}", fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata=_PNG_META)
    plt.close(fig)


@torch.no_grad()
def plot_attention(model, split, cfg, path):
    """Softmax-normalized temporal-to-class attention per class against timestep."""
    dtype = next(model.parameters()).dtype
    out = model(torch.as_tensor(split.series, dtype=dtype))
    K = model.config.K
    a = extract_t2c_attention(out.attention, K, cfg.attention_layer)  # [S, T, K]
    write_tensor_file(path.with_name("a_tilde.stsr"), a.numpy().astype(np.float32))
    mean = a.mean(dim=0).numpy()
    fig, ax = plt.subplots(figsize=(5, 3))
    for k in range(K):
        ax.plot(np.arange(mean.shape[0]), mean[:, k], marker="o", label=f"class {k + 1}")
    ax.set_xlabel("timestep")
    ax.set_ylabel("attention weight")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata=_PNG_META)
    plt.close(fig)
