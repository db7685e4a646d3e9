"""Named model topologies."""

from . import oracle

# (filters, stride, group size) for the 18 shift/1x1-conv layers; the
# classifier is the 19th layer. Input 3x224x224 reshaped to 48x56x56.
IMAGENET_SMALL_56 = (
    (64, 1, 1),
    (64, 1, 2),
    (128, 2, 2),
    (128, 1, 2),
    (128, 1, 2),
    (256, 2, 4),
    (256, 1, 4),
    (256, 1, 4),
    (256, 1, 4),
    (512, 2, 8),
    (512, 1, 8),
    (512, 1, 8),
    (512, 1, 8),
    (512, 1, 8),
    (512, 1, 8),
    (512, 1, 8),
    (512, 1, 8),
    (512, 1, 8),
)


def imagenet_small_56(seed: int = 0, classes: int = 1000):
    """Synthetic-weight model with the 56x56 ImageNet topology (reshape factor 4)."""
    return oracle.gen_synthetic(
        seed,
        layers=IMAGENET_SMALL_56,
        input_shape=(3, 224, 224),
        reshape_factor=4,
        classes=classes,
        fc_g=8,
    )


TOPOLOGIES = {"imagenet-small-56": imagenet_small_56}
