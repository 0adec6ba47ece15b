from enum import IntEnum


class Label(IntEnum):
    """Terrain classes; values are the on-disk segmentation codes."""

    ROAD_OTHER = 0
    GRASS = 1
    TREE = 2
    HOUSE = 3
    BUILDING = 4
    INVALID = 255


CLASSES = (Label.ROAD_OTHER, Label.GRASS, Label.TREE, Label.HOUSE, Label.BUILDING)

# row/column order used by confusion matrices and reports
EVAL_ORDER = (Label.TREE, Label.GRASS, Label.BUILDING, Label.HOUSE, Label.ROAD_OTHER)

DISPLAY_NAMES = {
    Label.ROAD_OTHER: "Road/Parking Lot",
    Label.GRASS: "Grass",
    Label.TREE: "Tree",
    Label.HOUSE: "House",
    Label.BUILDING: "Building",
    Label.INVALID: "Invalid",
}

VEGETATION = frozenset({Label.TREE, Label.GRASS})
MANMADE = frozenset({Label.BUILDING, Label.HOUSE, Label.ROAD_OTHER})
