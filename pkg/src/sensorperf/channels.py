"""Channel catalogue: names, aggregation kinds and feature groups."""

from __future__ import annotations

CHANNELS: tuple[str, ...] = (
    "heart_rate",
    "muscle_activity",
    "skin_resistance",
    "gaze_movement",
    "mouse_movement",
    "mouse_scroll",
    "chair_accel_x",
    "chair_accel_y",
    "chair_accel_z",
    "chair_gyro_x",
    "chair_gyro_y",
    "chair_gyro_z",
    "co2",
    "temperature",
    "humidity",
)

N_FEATURES = len(CHANNELS)

# distance-like channels are summed per bin, the rest averaged
SUM_CHANNELS = frozenset({"gaze_movement", "mouse_movement", "mouse_scroll"})

COLUMN_KINDS: tuple[str, ...] = tuple(
    "sum" if name in SUM_CHANNELS else "mean" for name in CHANNELS
)

# number of raw components per channel file
COMPONENTS: dict[str, int] = {
    name: (2 if name in ("gaze_movement", "mouse_movement") else 1) for name in CHANNELS
}

REPARAM_MODES: dict[str, str] = {
    "mouse_movement": "mouse_distance",
    "gaze_movement": "gaze_distance",
    "muscle_activity": "emg_l1_reference",
}

GROUP_NAMES: tuple[str, ...] = ("physical", "chair", "environment")
GROUP_LABELS: dict[str, str] = {
    "physical": "Physical Activity",
    "chair": "Chair Movement",
    "environment": "Environment",
}
GROUP_SIZES: tuple[int, ...] = (6, 6, 3)
