"""Semantic label set shared by completion, fusion and evaluation."""

EMPTY = 0
CEILING = 1
FLOOR = 2
WALL = 3
WINDOW = 4
CHAIR = 5
BED = 6
SOFA = 7
TABLE = 8
TV = 9
FURNITURE = 10
OBJECT = 11

NUM_CLASSES = 12  # including empty
SEMANTIC_LABELS = tuple(range(1, NUM_CLASSES))

LABEL_NAMES = (
    "empty", "ceiling", "floor", "wall", "window", "chair", "bed",
    "sofa", "table", "tv", "furniture", "object",
)

# RGB per label id; index 0 is only used for unlabeled occupied voxels.
PALETTE = (
    (128, 128, 128),
    (214, 38, 40),
    (43, 160, 4),
    (158, 216, 229),
    (114, 158, 206),
    (204, 204, 91),
    (255, 186, 119),
    (147, 102, 188),
    (30, 119, 181),
    (188, 188, 33),
    (255, 127, 12),
    (196, 175, 214),
)


def label_name(label: int) -> str:
    return LABEL_NAMES[label]


def label_from_name(name: str) -> int:
    try:
        return LABEL_NAMES.index(name)
    except ValueError:
        raise ValueError(f"unknown label name {name!r}") from None
